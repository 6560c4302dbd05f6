"""Spectrogram and waveform similarity, evaluation reports and attention timing."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dsp import MelSpectrogram, Waveform
from .errors import ConfigError, ContractError, DimensionError, InputError


def corr2d(a, b) -> float:
    """Pearson correlation over all entries of two equally shaped matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"corr2d: shapes differ {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(np.sum(da * da)), math.sqrt(np.sum(db * db))
    if na == 0.0 and nb == 0.0:
        raise ContractError("corr2d undefined: both inputs are constant")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.sum(da * db) / (na * nb), -1.0, 1.0))


def log_spectral_distance(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """RMS difference in dB after undoing each spectrogram's [0, 1] normalization."""
    if a.values.shape != b.values.shape:
        raise DimensionError(f"shapes differ {a.values.shape} vs {b.values.shape}")
    if (a.db_floor, a.db_ceil) != (b.db_floor, b.db_ceil):
        raise ConfigError(
            f"normalization ranges differ: [{a.db_floor}, {a.db_ceil}] vs [{b.db_floor}, {b.db_ceil}] dB"
        )
    diff = a.to_db() - b.to_db()
    return float(np.sqrt(np.mean(diff * diff)))


def waveform_pearson(a: Waveform, b: Waveform, max_lag: int = 0) -> tuple:
    """Best Pearson correlation over integer lags in ``[-max_lag, max_lag]``.

    Returns ``(correlation, lag)``; a positive lag means ``b`` trails ``a``.
    """
    if a.sample_rate != b.sample_rate:
        raise InputError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")
    x, y = np.asarray(a.samples, np.float64), np.asarray(b.samples, np.float64)
    best, best_lag = -np.inf, 0
    for lag in range(-int(max_lag), int(max_lag) + 1):
        xs, ys = (x[: len(y) - lag], y[lag:]) if lag >= 0 else (x[-lag:], y[: len(x) + lag])
        n = min(len(xs), len(ys))
        if n < 100:
            raise InputError(f"overlap of {n} samples at lag {lag} is shorter than 100")
        xs, ys = xs[:n], ys[:n]
        sx, sy = xs.std(), ys.std()
        r = 0.0 if sx == 0 or sy == 0 else float(np.mean((xs - xs.mean()) * (ys - ys.mean())) / (sx * sy))
        if r > best:
            best, best_lag = r, lag
    return best, best_lag


# -- evaluation report ----------------------------------------------------------------
METRICS = ("corr2d", "lsd_db", "wave_r")


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and sample standard deviation (0 for a single value)."""
    vals = [float(v) for v in values]
    if not vals:
        return float("nan"), float("nan")
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


@dataclass
class EvalReport:
    """Per-fold metrics for one (temporal module, GAN) setting plus run metadata."""

    temporal: str
    gan: bool
    folds: list = field(default_factory=list)  # [{"subject": str, "corr2d": .., ...}]
    meta: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for name in METRICS:
            vals = [f[name] for f in self.folds if name in f]
            if vals:
                m, s = mean_std(vals)
                out[name] = {"mean": m, "std": s, "n": len(vals)}
        return out

    def to_dict(self) -> dict:
        return {
            "temporal": self.temporal,
            "gan": self.gan,
            "folds": self.folds,
            "aggregate": self.aggregate(),
            "failures": self.failures,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["temporal"], bool(d["gan"]), list(d["folds"]), dict(d.get("meta", {})), list(d.get("failures", [])))


def _cell(agg: dict, name: str) -> str:
    if name not in agg:
        return "n/a"
    return f"{agg[name]['mean']:.3f} ± {agg[name]['std']:.3f}"


def format_table(reports: Sequence[EvalReport], param_counts: Optional[dict] = None) -> str:
    """Aligned text table with one row per (temporal module, GAN) setting."""
    header = ["temporal", "GAN", "folds", "Corr2D ↑", "LSD dB ↓", "wave r ↑"]
    rows = [header]
    order = {"cnn3d": 0, "transformer": 1}
    for r in sorted(reports, key=lambda r: (order.get(r.temporal, 2), r.gan)):
        agg = r.aggregate()
        n = len(r.folds)
        rows.append([r.temporal, "yes" if r.gan else "no", str(n)] + [_cell(agg, m) for m in METRICS])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("LSD and wave r stand in for PESQ; they are not comparable to PESQ scores.")
    if param_counts:
        t, c = param_counts["transformer"], param_counts["cnn3d"]
        lines.append(f"temporal params: transformer {t:,}  cnn3d {c:,}  ratio cnn3d/transformer {c / t:.3f}")
    return "\n".join(lines)


def save_reports(path, reports: Sequence[EvalReport], param_counts: Optional[dict] = None) -> None:
    payload = {"reports": [r.to_dict() for r in reports]}
    if param_counts:
        payload["param_counts"] = dict(param_counts, ratio=param_counts["cnn3d"] / param_counts["transformer"])
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


# -- attention benchmark ------------------------------------------------------------------
@dataclass
class BenchRow:
    T: int
    mode: str
    median_ms: float
    reps: int


def benchmark_attention(
    lengths: Sequence[int] = (64, 128, 256),
    d: int = 64,
    window: int = 3,
    repetitions: int = 9,
    warmup: int = 3,
    batch: int = 8,
    seed: int = 0,
) -> list:
    """Median forward wall time of windowed vs dense attention per sequence length.

    Before timing, windowed attention with a window covering the whole sequence
    is checked against dense attention (max abs diff < 1e-6); a mismatch raises.
    """
    from .numerics import dense_attention, no_grad, sliding_window_attention

    rng = np.random.default_rng(seed)
    if repetitions <= 0:
        return []
    with no_grad():
        t_chk = min(lengths)
        q, k, v = (rng.standard_normal((batch, t_chk, d)) for _ in range(3))
        full = sliding_window_attention(q, k, v, 2 * t_chk - 1).data
        ref = dense_attention(q, k, v).data
        err = float(np.max(np.abs(full - ref)))
        if not err < 1e-6:
            raise ContractError(f"windowed attention disagrees with dense attention (max diff {err:.3g})")

        rows = []
        for T in lengths:
            q, k, v = (rng.standard_normal((batch, T, d)).astype(np.float32) for _ in range(3))
            runs = {
                "windowed": lambda: sliding_window_attention(q, k, v, window),
                "dense": lambda: dense_attention(q, k, v),
            }
            for mode, fn in runs.items():
                for _ in range(warmup):
                    fn()
                samples = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    fn()
                    samples.append(time.perf_counter() - t0)
                rows.append(BenchRow(int(T), mode, 1000.0 * statistics.median(samples), repetitions))
    return rows


def bench_ratios(rows: Sequence[BenchRow]) -> dict:
    """time(T_max) / time(T_min) per mode; ``None`` when only one length was run."""
    out = {}
    for mode in ("windowed", "dense"):
        sel = sorted((r for r in rows if r.mode == mode), key=lambda r: r.T)
        out[mode] = sel[-1].median_ms / sel[0].median_ms if len(sel) >= 2 and sel[-1].T != sel[0].T else None
    return out


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "mode", "median_ms", "reps"])
    for r in rows:
        w.writerow([r.T, r.mode, f"{r.median_ms:.6f}", r.reps])
    return buf.getvalue()
