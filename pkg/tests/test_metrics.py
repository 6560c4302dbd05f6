import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from motion2spec.dsp import MelSpectrogram, Waveform
from motion2spec.errors import ConfigError, ContractError, DimensionError, InputError
from motion2spec.metrics import (
    EvalReport,
    bench_csv,
    bench_ratios,
    benchmark_attention,
    corr2d,
    format_table,
    log_spectral_distance,
    mean_std,
    save_reports,
    waveform_pearson,
)

mats = arrays(np.float64, (6, 7), elements=st.floats(-100, 100))


# -- corr2d ------------------------------------------------------------------------------
def test_corr2d_examples():
    A = np.random.default_rng(0).random((64, 64))
    assert corr2d(A, A) == pytest.approx(1.0)
    assert corr2d(A, 3.0 - A) == pytest.approx(-1.0)
    assert corr2d(A, A + 5) == pytest.approx(1.0)


def test_corr2d_matches_flattened_pearson():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 9)), rng.random((8, 9))
    assert corr2d(a, b) == pytest.approx(np.corrcoef(a.ravel(), b.ravel())[0, 1], abs=1e-12)


def test_corr2d_constant_inputs():
    with pytest.raises(ContractError):
        corr2d(np.ones((3, 3)), np.full((3, 3), 2.0))
    assert corr2d(np.ones((3, 3)), np.arange(9.0).reshape(3, 3)) == 0.0
    with pytest.raises(DimensionError):
        corr2d(np.ones((3, 3)), np.ones((3, 4)))


@given(mats, mats, st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_corr2d_symmetric_and_affine_invariant(a, b, alpha, beta):
    assume(np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3)
    r = corr2d(a, b)
    assert -1.0 <= r <= 1.0
    assert abs(r - corr2d(b, a)) < 1e-12
    assert abs(r - corr2d(alpha * a + beta, b)) < 1e-9


# -- log spectral distance -----------------------------------------------------------------
def test_lsd_examples():
    v = np.random.default_rng(0).random((64, 64)) * 0.8
    assert log_spectral_distance(MelSpectrogram(v), MelSpectrogram(v)) == 0.0
    assert log_spectral_distance(MelSpectrogram(v), MelSpectrogram(v + 0.125)) == pytest.approx(10.0)


def test_lsd_against_loop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((64, 64)), rng.random((64, 64))
    acc = 0.0
    for i in range(64):
        for j in range(64):
            da = -80 + a[i, j] * 80
            db = -80 + b[i, j] * 80
            acc += (da - db) ** 2
    ref = (acc / 4096) ** 0.5
    assert abs(log_spectral_distance(MelSpectrogram(a), MelSpectrogram(b)) - ref) < 1e-9


def test_lsd_rejects_mixed_normalization():
    with pytest.raises(ConfigError):
        log_spectral_distance(MelSpectrogram(np.zeros((2, 2))), MelSpectrogram(np.zeros((2, 2)), db_floor=-60.0))


# -- waveform pearson ------------------------------------------------------------------------
def test_waveform_self_and_delay():
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 5000)
    r, lag = waveform_pearson(Waveform(x, 22050), Waveform(x, 22050), 0)
    assert r == pytest.approx(1.0) and lag == 0
    delayed = np.concatenate([np.zeros(50), x[:-50]])
    r, lag = waveform_pearson(Waveform(x, 22050), Waveform(delayed, 22050), 100)
    assert r == pytest.approx(1.0) and lag == 50


@pytest.mark.parametrize("seed", range(20))
def test_independent_noise_is_uncorrelated(seed):
    rng = np.random.default_rng(seed)
    a, b = (Waveform(rng.uniform(-1, 1, 10000), 22050) for _ in range(2))
    assert abs(waveform_pearson(a, b, 0)[0]) < 0.1


def test_waveform_errors():
    w = Waveform(np.zeros(150), 22050)
    with pytest.raises(InputError):
        waveform_pearson(w, w, 60)
    with pytest.raises(InputError):
        waveform_pearson(w, Waveform(np.zeros(150), 16000))


# -- reports -------------------------------------------------------------------------------------
def _report(values, temporal="transformer", gan=False):
    folds = [{"subject": f"s{i}", "corr2d": v, "lsd_db": 10 * v} for i, v in enumerate(values)]
    return EvalReport(temporal, gan, folds, {"seed": 0})


def test_report_aggregate_recomputes():
    vals = [0.61, 0.72, 0.55, 0.8]
    agg = _report(vals).aggregate()["corr2d"]
    assert abs(agg["mean"] - np.mean(vals)) < 1e-12
    assert abs(agg["std"] - np.std(vals, ddof=1)) < 1e-12
    assert agg["n"] == 4


def test_report_round_trip():
    r = _report([0.1, 0.2])
    back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.to_dict() == r.to_dict()


def test_mean_std_edge_cases():
    assert mean_std([0.5]) == (0.5, 0.0)
    m, s = mean_std([])
    assert np.isnan(m) and np.isnan(s)


def test_table_rows_cover_all_settings(tmp_path):
    reps = [_report([0.5, 0.6], t, g) for t in ("transformer", "cnn3d") for g in (True, False)]
    text = format_table(reps, {"transformer": 100, "cnn3d": 160})
    lines = text.splitlines()
    body = [ln for ln in lines[2:6]]
    assert [ln.split()[:2] for ln in body] == [["cnn3d", "no"], ["cnn3d", "yes"], ["transformer", "no"], ["transformer", "yes"]]
    assert "ratio cnn3d/transformer 1.600" in text
    save_reports(tmp_path / "r.json", reps, {"transformer": 100, "cnn3d": 160})
    assert json.loads((tmp_path / "r.json").read_text())["param_counts"]["ratio"] == 1.6


# -- benchmark ----------------------------------------------------------------------------------
def test_benchmark_zero_repetitions():
    assert benchmark_attention(repetitions=0) == []


def test_benchmark_small_run_shape():
    rows = benchmark_attention(lengths=(8, 16), d=8, repetitions=2, warmup=1, batch=1)
    assert [(r.T, r.mode) for r in rows] == [(8, "windowed"), (8, "dense"), (16, "windowed"), (16, "dense")]
    assert bench_csv(rows).splitlines()[0] == "T,mode,median_ms,reps"
    assert set(bench_ratios(rows)) == {"windowed", "dense"}
    assert bench_ratios(rows[:2]) == {"windowed": None, "dense": None}
