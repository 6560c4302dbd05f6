import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motion2spec.dsp import (
    DspConfig,
    MelSpectrogram,
    Waveform,
    griffin_lim,
    hann,
    hz_to_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_spectrogram,
    mel_to_audio,
    mel_to_linear,
    normalize_db,
    read_wav,
    stft,
    write_wav,
)
from motion2spec.errors import ConfigError, InputError
from motion2spec.metrics import corr2d

CFG = DspConfig()
SR = CFG.sample_rate


def tone(freq, n=21000, amp=0.5):
    t = np.arange(n) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


# -- stft ------------------------------------------------------------------
def test_stft_zero_and_frame_count():
    spec = stft(Waveform(np.zeros(21000), SR), CFG)
    assert spec.shape == (CFG.n_fft // 2 + 1, 21000 // CFG.hop + 1)
    assert not np.any(np.abs(spec))


def test_stft_too_short():
    with pytest.raises(InputError):
        stft(Waveform(np.zeros(CFG.n_fft - 1), SR), CFG)


def test_stft_bin_centre_sine_dominates():
    k = 40
    mag = np.abs(stft(tone(k * SR / CFG.n_fft, 8192), CFG))
    for frame in mag.T[2:-2]:
        assert np.argmax(frame) == k
        far = np.delete(frame, [k - 1, k, k + 1])
        assert frame[k] >= 10 * far.max()


def test_stft_parseval_per_frame():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 4096)
    spec = stft(Waveform(x, SR), CFG)
    padded = np.pad(x, CFG.n_fft // 2, mode="reflect")
    w = hann(CFG.n_fft)
    for i in range(spec.shape[1]):
        frame = padded[i * CFG.hop : i * CFG.hop + CFG.n_fft] * w
        energy = float(np.sum(frame**2))
        p = np.abs(spec[:, i]) ** 2
        full = p[0] + p[-1] + 2 * p[1:-1].sum()  # mirror the one-sided spectrum
        assert full / CFG.n_fft == pytest.approx(energy, rel=1e-6)


# -- filterbank -------------------------------------------------------------------
def test_filterbank_shape_and_triangles():
    bank = mel_filterbank(CFG)
    assert bank.shape == (64, CFG.n_fft // 2 + 1)
    assert np.all(bank >= 0)
    for row in bank:
        nz = row[row > 0]
        peak = int(np.argmax(nz))
        assert np.all(np.diff(nz[: peak + 1]) >= 0) and np.all(np.diff(nz[peak:]) <= 0)
    assert np.all(np.diff(mel_center_frequencies(CFG)) > 0)


def test_mel_of_1000_hz():
    assert abs(float(hz_to_mel(1000.0)) - 1000.0) < 0.5


def test_filterbank_rejects_empty_filters():
    with pytest.raises(ConfigError):
        mel_filterbank(DspConfig(n_fft=64, n_mels=64))


def test_config_validation():
    with pytest.raises(ConfigError):
        DspConfig(fmin=5000, fmax=4000)
    with pytest.raises(ConfigError):
        DspConfig(fmax=SR)
    with pytest.raises(ConfigError):
        DspConfig(db_floor=0.0, db_ceil=-10.0)


# -- mel spectrogram ------------------------------------------------------------------
def test_crop_gives_64_by_64():
    m = mel_spectrogram(tone(300), CFG)
    assert m.values.shape == (64, 64)
    assert 0.0 <= m.values.min() and m.values.max() <= 1.0


def test_silence_is_all_zero():
    assert not np.any(mel_spectrogram(Waveform(np.zeros(21000), SR), CFG).values)


def test_wrong_length_is_config_error():
    with pytest.raises(ConfigError):
        mel_spectrogram(Waveform(np.zeros(30000), SR), CFG)


def test_440_hz_lands_on_nearest_filter():
    m = mel_spectrogram(tone(440.0), CFG)
    expected = int(np.argmin(np.abs(mel_center_frequencies(CFG) - 440.0)))
    assert np.all(np.argmax(m.values, axis=0) == expected)


@given(st.floats(100, 8000), st.floats(0.05, 1.0))
@settings(max_examples=15, deadline=None)
def test_mel_values_in_unit_range(freq, amp):
    m = mel_spectrogram(tone(freq, amp=amp), CFG)
    assert m.values.shape == (64, 64)
    assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_mel_is_gain_invariant():
    a = mel_spectrogram(tone(600, amp=0.9), CFG).values
    b = mel_spectrogram(tone(600, amp=0.09), CFG).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_dsp_is_pure():
    w = tone(523.0)
    assert np.array_equal(mel_spectrogram(w, CFG).values, mel_spectrogram(w, CFG).values)
    m = mel_spectrogram(w, CFG)
    assert np.array_equal(mel_to_audio(m, CFG).samples, mel_to_audio(m, CFG).samples)


# -- inversion ---------------------------------------------------------------------------
def test_zero_mel_inverts_to_zero():
    m = MelSpectrogram(np.zeros((64, 64)))
    assert not np.any(mel_to_linear(m, CFG))
    assert not np.any(griffin_lim(np.zeros((513, 64)), CFG).samples)


def test_mel_to_linear_non_negative():
    m = mel_spectrogram(Waveform(np.random.default_rng(1).uniform(-0.5, 0.5, 21000), SR), CFG)
    assert mel_to_linear(m, CFG).min() >= 0.0


def test_linear_mel_linear_round_trip_on_smooth_spectrum():
    # frame-averaged spectrum of band-limited noise: a smooth envelope
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8 * 21000)
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1 / SR)
    spec[(f < 300) | (f > 4000)] = 0
    x = np.fft.irfft(spec, n=x.size)
    x = 0.9 * x / np.abs(x).max()
    psd = np.mean(np.abs(stft(Waveform(x, SR), CFG)) ** 2, axis=1)
    lin = np.tile(np.sqrt(psd)[:, None], (1, 64))
    rec = mel_to_linear(normalize_db(mel_filterbank(CFG) @ lin**2, CFG), CFG)
    assert np.linalg.norm(rec - lin) / np.linalg.norm(lin) < 0.35


def test_single_mel_bin_stays_in_filter_support():
    values = np.zeros((64, 64))
    values[20, :] = 1.0
    lin = mel_to_linear(MelSpectrogram(values), CFG)
    support = mel_filterbank(CFG)[20] > 0
    assert np.all(lin[~support] == 0)
    assert np.any(lin[support] > 0)


def test_griffin_lim_on_sine_magnitude():
    w = tone(700.0)
    mag = np.abs(stft(w, CFG))
    history = []
    out = griffin_lim(mag, CFG, length=len(w), history=history)
    assert np.max(np.abs(out.samples)) == pytest.approx(1.0)
    assert corr2d(np.abs(stft(out, CFG)), mag) >= 0.95
    assert len(history) == CFG.griffin_lim_iters
    assert all(b <= a * (1 + 1e-9) for a, b in zip(history, history[1:]))


@pytest.mark.parametrize("freqs,floor", [((440.0,), 0.9), ((330.0, 1250.0), 0.75)])
def test_full_chain_round_trip(freqs, floor):
    t = np.arange(21000) / SR
    x = sum(np.sin(2 * np.pi * f * t) for f in freqs)
    w = Waveform(0.8 * x / np.abs(x).max(), SR)
    m = mel_spectrogram(w, CFG)
    back = mel_spectrogram(mel_to_audio(m, CFG, length=21000), CFG)
    assert corr2d(back.values, m.values) >= floor


# -- wav ------------------------------------------------------------------------------
def test_wav_round_trip(tmp_path):
    w = tone(250.0, 5000)
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32767


def test_wav_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    import wave

    with wave.open(str(tmp_path / "st.wav"), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(SR)
        fh.writeframes(b"\0" * 40)
    with pytest.raises(InputError):
        read_wav(tmp_path / "st.wav")


def test_waveform_range_enforced():
    with pytest.raises(InputError):
        Waveform(np.array([0.0, 1.5]), SR)
