"""Waveform <-> mel-spectrogram conversion.

STFT framing is centered with reflect padding and a periodic Hann window.
Mel spectrograms are power -> mel projection -> dB relative to the clip
maximum -> clamp to ``[db_floor, db_ceil]`` -> linear map to ``[0, 1]``, so
they match the sigmoid range of the decoder. Inversion goes through a
non-negative least-squares fit of the mel projection and Griffin-Lim.
"""

from __future__ import annotations

import wave
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError

_AMIN = 1e-10
_GRIFFIN_LIM_SEED = 0
_NNLS_ITERS = 500


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 328
    n_mels: int = 64
    n_frames: int = 64
    fmin: float = 40.0
    fmax: Optional[float] = None  # None -> sample_rate / 2
    db_floor: float = -80.0
    db_ceil: float = 0.0
    griffin_lim_iters: int = 60
    crop_len: int = 21000

    def __post_init__(self):
        if self.sample_rate <= 0 or self.n_fft < 2 or self.hop < 1 or self.n_mels < 1:
            raise ConfigError("sample_rate, n_fft, hop and n_mels must be positive")
        if not (0 <= self.fmin < self.top_freq <= self.sample_rate / 2):
            raise ConfigError(f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin}, fmax={self.top_freq}")
        if self.db_floor >= self.db_ceil:
            raise ConfigError("db_floor must be below db_ceil")
        if self.griffin_lim_iters < 1:
            raise ConfigError("griffin_lim_iters must be >= 1")

    @property
    def top_freq(self) -> float:
        return float(self.sample_rate) / 2 if self.fmax is None else float(self.fmax)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise InputError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    """Normalized mel magnitudes in ``[0, 1]`` plus what is needed to undo the scaling.

    ``ref_db`` is the absolute level (dB of mel power) that maps to ``db_ceil``.
    """

    values: np.ndarray
    db_floor: float = -80.0
    db_ceil: float = 0.0
    ref_db: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def normalization(self) -> dict:
        return {"db_floor": self.db_floor, "db_ceil": self.db_ceil, "ref_db": self.ref_db}

    def to_db(self) -> np.ndarray:
        """Values in dB relative to the clip reference."""
        return self.db_floor + self.values * (self.db_ceil - self.db_floor)


# -- framing -----------------------------------------------------------------
def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the STFT convention, not the symmetric filter one)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    n_frames = 1 + (padded.size - n_fft) // hop
    return np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]


def stft(w: Waveform, cfg: DspConfig) -> np.ndarray:
    """Complex STFT ``[n_fft // 2 + 1, 1 + len // hop]``."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if samples.size < cfg.n_fft:
        raise InputError(f"waveform of {samples.size} samples is shorter than n_fft={cfg.n_fft}")
    frames = _frames(samples, cfg.n_fft, cfg.hop) * hann(cfg.n_fft)
    return np.fft.rfft(frames, axis=1).T


def _overlap_add(spec: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Least-squares signal (uncropped) whose unpadded frames best match ``spec``."""
    window = hann(cfg.n_fft)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1) * window
    total = cfg.n_fft + cfg.hop * (frames.shape[0] - 1)
    signal = np.zeros(total)
    norm = np.zeros(total)
    sq = window**2
    for i, frame in enumerate(frames):
        start = i * cfg.hop
        signal[start : start + cfg.n_fft] += frame
        norm[start : start + cfg.n_fft] += sq
    nonzero = norm > 1e-10
    signal[nonzero] /= norm[nonzero]
    return signal


def _analyze(signal: np.ndarray, cfg: DspConfig, n_frames: int) -> np.ndarray:
    """Unpadded STFT of an overlap-add signal (adjoint partner of ``_overlap_add``)."""
    frames = np.lib.stride_tricks.sliding_window_view(signal, cfg.n_fft)[:: cfg.hop][:n_frames]
    return np.fft.rfft(frames * hann(cfg.n_fft), axis=1).T


def istft(spec: np.ndarray, cfg: DspConfig, length: Optional[int] = None) -> np.ndarray:
    """Inverse of :func:`stft` (windowed least-squares overlap-add, centre padding removed)."""
    signal = _overlap_add(spec, cfg)
    if length is None:
        length = cfg.hop * (spec.shape[1] - 1)
    out = signal[cfg.n_fft // 2 :]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


# -- mel scale ---------------------------------------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: DspConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.top_freq), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` with unit peak height."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.top_freq), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(bank.max(axis=1) <= 0.0)
    if empty.size:
        raise ConfigError(f"{empty.size} mel filters cover no FFT bin; lower n_mels or raise n_fft")
    return bank


# -- forward transform ---------------------------------------------------------
def mel_power(w: Waveform, cfg: DspConfig) -> np.ndarray:
    """Unnormalized mel power ``[n_mels, n_frames]`` (last frame trimmed if needed)."""
    spec = stft(w, cfg)
    n_frames = spec.shape[1]
    if n_frames not in (cfg.n_frames, cfg.n_frames + 1):
        raise ConfigError(
            f"{len(w)} samples give {n_frames} frames at hop {cfg.hop}; need {cfg.n_frames} (retune hop)"
        )
    power = np.abs(spec[:, : cfg.n_frames]) ** 2
    return mel_filterbank(cfg) @ power


def normalize_db(mel_pow: np.ndarray, cfg: DspConfig) -> MelSpectrogram:
    peak = float(mel_pow.max()) if mel_pow.size else 0.0
    if peak <= _AMIN:
        return MelSpectrogram(np.zeros_like(mel_pow), cfg.db_floor, cfg.db_ceil, ref_db=10 * np.log10(_AMIN))
    ref_db = 10.0 * np.log10(peak)
    rel = 10.0 * np.log10(np.maximum(mel_pow, _AMIN)) - ref_db
    rel = np.clip(rel, cfg.db_floor, cfg.db_ceil)
    values = (rel - cfg.db_floor) / (cfg.db_ceil - cfg.db_floor)
    return MelSpectrogram(values, cfg.db_floor, cfg.db_ceil, ref_db=ref_db)


def mel_spectrogram(w: Waveform, cfg: DspConfig) -> MelSpectrogram:
    return normalize_db(mel_power(w, cfg), cfg)


# -- inversion -------------------------------------------------------------------
def denormalize_power(m: MelSpectrogram) -> np.ndarray:
    """Mel power from normalized values; entries clamped at the floor map to zero."""
    db = m.to_db() + m.ref_db
    power = 10.0 ** (db / 10.0)
    power[m.values <= 0.0] = 0.0
    return power


@lru_cache(maxsize=8)
def _mel_inverse(cfg: DspConfig):
    bank = mel_filterbank(cfg)
    return bank, np.linalg.pinv(bank), float(np.linalg.norm(bank, 2) ** 2)


def mel_to_linear(m: MelSpectrogram, cfg: DspConfig) -> np.ndarray:
    """Linear STFT magnitudes ``[n_fft // 2 + 1, n_frames]`` from a mel spectrogram.

    Solves ``min ||B p - mel||`` over non-negative power ``p``: start from
    the clipped pseudo-inverse (the smooth minimum-norm answer) and refine
    with projected gradient steps. All frames are solved at once.
    """
    bank, pinv, lipschitz = _mel_inverse(cfg)
    power = denormalize_power(m)
    scale = power.max()
    if scale <= 0.0:
        return np.zeros((bank.shape[1], power.shape[1]))
    target = power / scale
    # bins outside every active band can only add residual
    support = (bank.T @ (target > 0)) > 0
    x = np.maximum(pinv @ target, 0.0) * support
    for _ in range(_NNLS_ITERS):
        x -= bank.T @ (bank @ x - target) / lipschitz
        np.maximum(x, 0.0, out=x)
        x *= support
    return np.sqrt(x * scale)


def griffin_lim(mag: np.ndarray, cfg: DspConfig, length: Optional[int] = None, history: Optional[list] = None) -> Waveform:
    """Estimate a waveform whose STFT magnitude approximates ``mag``.

    Plain alternating projections (no momentum) from a fixed-seed random
    phase. Iterating on the uncropped overlap-add signal keeps the STFT/ISTFT
    pair an orthogonal projection, so the inconsistency appended to
    ``history`` each iteration never increases. Output is peak-normalized.
    """
    mag = np.asarray(mag, dtype=np.float64)
    n_frames = mag.shape[1]
    if length is None:
        length = cfg.hop * (n_frames - 1)
    if not np.any(mag > 0):
        return Waveform(np.zeros(length), cfg.sample_rate)
    rng = np.random.default_rng(_GRIFFIN_LIM_SEED)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    signal = None
    for _ in range(cfg.griffin_lim_iters):
        target = mag * angles
        signal = _overlap_add(target, cfg)
        rebuilt = _analyze(signal, cfg, n_frames)
        if history is not None:
            history.append(float(np.linalg.norm(rebuilt - target)))
        angles = np.exp(1j * np.angle(rebuilt))
    out = signal[cfg.n_fft // 2 :][:length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    peak = np.max(np.abs(out))
    return Waveform(out / peak if peak > 0 else out, cfg.sample_rate)


def mel_to_audio(m: MelSpectrogram, cfg: DspConfig, length: Optional[int] = None) -> Waveform:
    return griffin_lim(mel_to_linear(m, cfg), cfg, length=length)


# -- WAV I/O -------------------------------------------------------------------
def write_wav(path, w: Waveform) -> None:
    """PCM 16-bit little-endian mono."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit mono PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)
