"""Synthetic paired motion/audio data, crop augmentation, LOO splits and tensor files.

Each synthetic subject has a latent ``z``: three formant-like frequencies and an
amplitude envelope (rate, phase). The audio is a sum of three sinusoids at those
frequencies under the envelope. The motion field is a sum of three Gaussian
blobs at fixed positions; blob ``i`` displaces tissue with an amplitude that is
linear in formant ``i``'s position inside its band, and oscillates in time with
the same envelope as the audio. Motion therefore determines the spectrogram.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import binio
from .dsp import DspConfig, Waveform, mel_spectrogram, read_wav, write_wav
from .errors import ConfigError, InputError, IntegrityError, UnknownSubjectError
from .model import ModelConfig

TENSOR_MAGIC = b"M2ST"
TENSOR_VERSION = 1

FORMANT_BANDS = ((400.0, 700.0), (1200.0, 1800.0), (2600.0, 3400.0))
FORMANT_GAINS = (1.0, 0.6, 0.35)
AM_RATE_RANGE = (1.5, 4.0)
AUDIO_LEN_RANGE = (21000, 24175)
ENVELOPE_DEPTH = 0.8


# -- tensor files ------------------------------------------------------------------
def write_tensor(path, tensor: np.ndarray) -> None:
    body = struct.pack("<I", TENSOR_VERSION) + binio.pack_array(np.asarray(tensor))
    binio.atomic_write(path, binio.frame(TENSOR_MAGIC, body))


def read_tensor(path) -> np.ndarray:
    """Load a tensor file; corrupt bytes raise IntegrityError, bad headers FormatError."""
    blob = Path(path).read_bytes()
    body = binio.unframe(blob, TENSOR_MAGIC, str(path))
    reader = binio.Reader(body, str(path))
    (version,) = reader.unpack("<I")
    if version != TENSOR_VERSION:
        raise IntegrityError(f"{path}: tensor format version {version}, expected {TENSOR_VERSION}")
    arr = reader.array()
    reader.done()
    return arr


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- synthetic generator -------------------------------------------------------------
@dataclass(frozen=True)
class Latent:
    formants: tuple  # Hz
    positions: tuple  # each formant's relative position in its band, [0, 1]
    am_rate: float  # Hz
    am_phase: float  # rad
    length: int  # pre-crop audio samples

    def to_dict(self) -> dict:
        return {
            "formants": list(self.formants),
            "positions": list(self.positions),
            "am_rate": self.am_rate,
            "am_phase": self.am_phase,
            "length": self.length,
        }


def draw_latent(rng: np.random.Generator) -> Latent:
    pos = rng.uniform(0.0, 1.0, size=3)
    formants = tuple(float(lo + p * (hi - lo)) for p, (lo, hi) in zip(pos, FORMANT_BANDS))
    return Latent(
        formants=formants,
        positions=tuple(float(p) for p in pos),
        am_rate=float(rng.uniform(*AM_RATE_RANGE)),
        am_phase=float(rng.uniform(0.0, 2 * np.pi)),
        length=int(rng.integers(AUDIO_LEN_RANGE[0], AUDIO_LEN_RANGE[1] + 1)),
    )


def envelope(z: Latent, t: np.ndarray) -> np.ndarray:
    """Amplitude envelope in [1 - depth, 1] at times ``t`` (seconds)."""
    return 1.0 - ENVELOPE_DEPTH * 0.5 * (1.0 + np.sin(2 * np.pi * z.am_rate * t + z.am_phase))


def synth_audio(z: Latent, sample_rate: int, rng: np.random.Generator) -> Waveform:
    t = np.arange(z.length) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    tone = sum(g * np.sin(2 * np.pi * f * t + p) for f, g, p in zip(z.formants, FORMANT_GAINS, phases))
    x = envelope(z, t) * tone
    return Waveform(0.9 * x / np.max(np.abs(x)), sample_rate)


def _blob_centres(side: int) -> list:
    c = np.array([0.3, 0.5, 0.7]) * side
    return [np.array([c[0], c[1], c[2]]), np.array([c[1], c[2], c[0]]), np.array([c[2], c[0], c[1]])]


def synth_motion(z: Latent, cfg: ModelConfig, dsp: DspConfig, dtype=np.float32) -> np.ndarray:
    """Displacement field ``[3, D, H, W, T]`` for latent ``z``.

    Frame ``k`` samples the envelope at the centre of its slice of the cropped
    audio window, so motion and the (offset-0) crop are time aligned.
    """
    D, H, W = cfg.frame_shape
    T = cfg.n_frames
    times = (np.arange(T) + 0.5) / T * dsp.crop_len / dsp.sample_rate
    env = envelope(z, times)
    grid = np.stack(np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij"))
    sigma = max(D, H, W) / 8.0
    out = np.zeros((3, D, H, W, T), dtype=np.float64)
    for axis, (centre, pos) in enumerate(zip(_blob_centres(min(D, H, W)), z.positions)):
        d2 = sum((grid[i] - centre[i]) ** 2 for i in range(3))
        blob = np.exp(-d2 / (2 * sigma**2))
        amp = 0.2 + 0.8 * pos
        out[axis] += blob[..., None] * (amp * env)[None, None, None, :]
    return out.astype(dtype)


@dataclass
class Manifest:
    seed: Optional[int]
    preset: str
    samples: list = field(default_factory=list)
    root: Optional[Path] = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "preset": self.preset, "samples": self.samples}

    def subjects(self) -> list:
        return sorted({s["subject_id"] for s in self.samples})

    def subset(self, keep) -> "Manifest":
        return Manifest(self.seed, self.preset, [s for s in self.samples if keep(s)], self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def save(self, path) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        binio.atomic_write(path, text.encode())


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    m = Manifest(data.get("seed"), data.get("preset", "desk"), data["samples"], path.parent)
    ids = [s["subject_id"] for s in m.samples]
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"{path}: duplicate subject ids")
    return m


def synth_generate(seed: int, n_subjects: int, cfg: ModelConfig, out_dir, dsp: Optional[DspConfig] = None) -> Manifest:
    """Write ``n_subjects`` paired samples plus ``manifest.json`` under ``out_dir``."""
    if n_subjects < 2:
        raise ConfigError("need at least 2 subjects (leave-one-out requires a training side)")
    dsp = dsp or DspConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = Manifest(seed=seed, preset=cfg.preset, root=out)
    width = max(2, len(str(n_subjects - 1)))
    for i in range(n_subjects):
        sid = f"s{i:0{width}d}"
        z = draw_latent(rng)
        audio = synth_audio(z, dsp.sample_rate, rng)
        motion = synth_motion(z, cfg, dsp, dtype=np.dtype(cfg.dtype))
        mpath, apath = out / f"{sid}_motion.m2st", out / f"{sid}_audio.wav"
        write_tensor(mpath, motion)
        write_wav(apath, audio)
        manifest.samples.append(
            {
                "path": mpath.name,
                "audio": apath.name,
                "subject_id": sid,
                "tag": f"synthetic-{i % 2}",
                "sha256": sha256_file(mpath),
                "audio_sha256": sha256_file(apath),
                "latent": z.to_dict(),
            }
        )
    manifest.save(out / "manifest.json")
    return manifest


# -- augmentation and splits ----------------------------------------------------------
def crop_offsets(length: int, target_len: int = 21000, n_crops: int = 100) -> list:
    if length < target_len:
        raise InputError(f"waveform has {length} samples, shorter than crop length {target_len}")
    if n_crops < 1:
        return []
    span = length - target_len
    if n_crops == 1:
        return [0]
    return [int(round(k * span / (n_crops - 1))) for k in range(n_crops)]


def crop_augment(w: Waveform, target_len: int = 21000, n_crops: int = 100) -> list:
    """``n_crops`` windows of ``target_len`` samples at evenly spaced offsets."""
    return [Waveform(w.samples[o : o + target_len].copy(), w.sample_rate) for o in crop_offsets(len(w), target_len, n_crops)]


def loo_split(manifest: Manifest, held_out_subject: str) -> tuple:
    if held_out_subject not in manifest.subjects():
        raise UnknownSubjectError(f"subject {held_out_subject!r} not in manifest")
    train = manifest.subset(lambda s: s["subject_id"] != held_out_subject)
    test = manifest.subset(lambda s: s["subject_id"] == held_out_subject)
    return train, test


# -- training pairs -------------------------------------------------------------------
@dataclass
class PairedSample:
    motion: np.ndarray
    audio: Waveform
    subject_id: str
    tag: str


@dataclass
class PairSet:
    """Stacked training pairs: ``motion [N, 3, D, H, W, T]``, ``target [N, 1, 64, 64]``."""

    motion: np.ndarray
    target: np.ndarray
    subject_ids: list

    def __len__(self) -> int:
        return self.motion.shape[0]


def load_sample(manifest: Manifest, entry: dict, verify: bool = True) -> PairedSample:
    mpath = manifest.resolve(entry["path"])
    if verify and sha256_file(mpath) != entry["sha256"]:
        raise IntegrityError(f"{mpath}: checksum does not match manifest")
    apath = manifest.resolve(entry["audio"])
    if verify and "audio_sha256" in entry and sha256_file(apath) != entry["audio_sha256"]:
        raise IntegrityError(f"{apath}: checksum does not match manifest")
    return PairedSample(read_tensor(mpath), read_wav(apath), entry["subject_id"], entry.get("tag", ""))


def build_pairs(manifest: Manifest, cfg: ModelConfig, dsp: Optional[DspConfig] = None, n_crops: int = 1) -> PairSet:
    """Pair every audio crop's mel target with its subject's full motion sequence."""
    dsp = dsp or DspConfig()
    motions, targets, ids = [], [], []
    for entry in manifest.samples:
        s = load_sample(manifest, entry)
        if s.motion.shape != cfg.motion_shape:
            raise InputError(f"{entry['path']}: motion shape {s.motion.shape} != config {cfg.motion_shape}")
        if s.audio.sample_rate != dsp.sample_rate:
            raise InputError(f"{entry['audio']}: sample rate {s.audio.sample_rate} != {dsp.sample_rate}")
        for crop in crop_augment(s.audio, dsp.crop_len, n_crops):
            motions.append(s.motion)
            targets.append(mel_spectrogram(crop, dsp).values[None])
            ids.append(s.subject_id)
    if not motions:
        raise InputError("dataset is empty")
    dt = np.dtype(cfg.dtype)
    return PairSet(np.stack(motions).astype(dt, copy=False), np.stack(targets).astype(dt), ids)


def loo_folds(manifest: Manifest, subjects: Optional[Sequence[str]] = None):
    """Yield ``(subject, train, test)`` for each held-out subject."""
    for sid in subjects if subjects is not None else manifest.subjects():
        train, test = loo_split(manifest, sid)
        yield sid, train, test
