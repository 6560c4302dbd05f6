"""Leave-one-out evaluation: train (or load) one translator per held-out subject."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import Manifest, build_pairs, crop_augment, load_sample, loo_split
from .dsp import MelSpectrogram, mel_to_audio
from .errors import Motion2SpecError
from .metrics import EvalReport, corr2d, log_spectral_distance, waveform_pearson
from .model import temporal_param_counts
from .training import load_checkpoint, predict, train

WAVE_MAX_LAG = 256


def pick_subjects(manifest: Manifest, n_folds: Optional[int]) -> list:
    """``n_folds`` held-out subjects spread evenly over the sorted subject list."""
    subjects = manifest.subjects()
    if n_folds is None or n_folds >= len(subjects):
        return subjects
    if n_folds < 1:
        raise ValueError("need at least one fold")
    step = len(subjects) / n_folds
    return [subjects[int(k * step)] for k in range(n_folds)]


def score_subject(translator, test: Manifest, run: RunConfig, with_audio: bool = True) -> dict:
    """Metrics of ``translator`` on the held-out subject's offset-0 crop."""
    pairs = build_pairs(test, run.model, run.dsp, n_crops=1)
    pred = predict(translator, pairs.motion, run.optim.batch_size)
    dsp = run.dsp
    scores = {"corr2d": [], "lsd_db": [], "wave_r": []}
    for i, entry in enumerate(test.samples):
        p, t = pred[i, 0].astype(np.float64), pairs.target[i, 0].astype(np.float64)
        scores["corr2d"].append(corr2d(p, t))
        mp = MelSpectrogram(p, dsp.db_floor, dsp.db_ceil)
        mt = MelSpectrogram(t, dsp.db_floor, dsp.db_ceil)
        scores["lsd_db"].append(log_spectral_distance(mp, mt))
        if with_audio:
            sample = load_sample(test, entry)
            ref = crop_augment(sample.audio, dsp.crop_len, 1)[0]
            est = mel_to_audio(mp, dsp, length=dsp.crop_len)
            scores["wave_r"].append(waveform_pearson(ref, est, WAVE_MAX_LAG)[0])
    return {k: float(np.mean(v)) for k, v in scores.items() if v}


def run_loo(
    manifest: Manifest,
    run: RunConfig,
    out_dir,
    n_folds: Optional[int] = None,
    checkpoint_dir=None,
    with_audio: bool = True,
    log: Optional[Callable[[str], None]] = None,
) -> EvalReport:
    """Evaluate every fold; the report file is rewritten after each fold.

    With ``checkpoint_dir`` the per-fold checkpoints ``fold_<id>/checkpoint.m2sc``
    are loaded instead of training. A failing fold is recorded in
    ``report.failures`` and the remaining folds still run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(
        temporal=run.model.temporal,
        gan=run.loss.gan_enabled,
        meta={
            "config_hash": run.model.hash().hex(),
            "seed": run.seed,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "param_counts": temporal_param_counts(run.model),
        },
    )
    report_path = out / "report.json"
    for sid in pick_subjects(manifest, n_folds):
        fold_dir = out / f"fold_{sid}"
        t0 = time.time()
        try:
            train_m, test_m = loo_split(manifest, sid)
            if checkpoint_dir is not None:
                ckpt = load_checkpoint(Path(checkpoint_dir) / f"fold_{sid}" / "checkpoint.m2sc", expected=run.model)
                translator = ckpt.build_translator()
            else:
                pairs = build_pairs(train_m, run.model, run.dsp, n_crops=run.data.n_crops)
                translator = train(pairs, run.model, run.loss, run.optim, out_dir=fold_dir).translator
            scores = score_subject(translator, test_m, run, with_audio)
            report.folds.append({"subject": sid, **scores, "seconds": round(time.time() - t0, 2)})
            if log:
                log(f"fold {sid}: " + "  ".join(f"{k}={v:.4f}" for k, v in scores.items()))
        except (Motion2SpecError, OSError, ValueError) as exc:
            report.failures.append({"subject": sid, "error": f"{type(exc).__name__}: {exc}"})
            if log:
                log(f"fold {sid} FAILED: {exc}")
        report_path.write_text(json.dumps(report.to_dict(), indent=2))
    return report
