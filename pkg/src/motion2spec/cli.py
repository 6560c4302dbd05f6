"""``motion2spec`` command line: gen-data, train, synth, eval, bench.

Exit codes: 0 ok, 2 invalid arguments or config, 3 missing input or I/O
failure, 4 training aborted or a failed evaluation fold, 5 checkpoint
integrity or config mismatch. Summaries go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config, save_config
from .errors import (
    ConfigError,
    FormatError,
    IncompatibleCheckpointError,
    InputError,
    IntegrityError,
    TrainingAborted,
    UnknownSubjectError,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ABORT, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


class FoldFailure(Exception):
    pass


def _err(msg: str) -> None:
    print(f"motion2spec: {msg}", file=sys.stderr)


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def write_run_manifest(out: Path, command: str, args: argparse.Namespace) -> Path:
    """Index every file under ``out`` with its size and sha256."""
    files = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.json":
            files.append(
                {
                    "path": str(p.relative_to(out)),
                    "bytes": p.stat().st_size,
                    "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                }
            )
    doc = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "files": files,
    }
    path = out / "MANIFEST.json"
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path


def _resolve(args, need_data: bool = False) -> RunConfig:
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None) and args.preset != run.preset:
        raw = run.to_dict()
        raw["preset"] = args.preset
        raw["model"] = {}
        run = RunConfig.from_dict(raw)
    run = run.override("model", temporal=getattr(args, "temporal", None))
    gan = getattr(args, "gan", None)
    run = run.override("loss", gan_enabled=None if gan is None else gan == "on")
    seed = getattr(args, "seed", None)
    if seed is not None:
        run = RunConfig.from_dict(dict(run.to_dict(), seed=seed, optim=dict(run.to_dict()["optim"], seed=seed)))
    run = run.override(
        "optim",
        max_steps=getattr(args, "max_steps", None),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
    )
    run = run.override("data", n_crops=getattr(args, "crops", None))
    run = run.override("paths", data=getattr(args, "data", None), out=getattr(args, "out", None))
    if need_data and not run.paths.data:
        raise ConfigError("no dataset given (--data or paths.data)")
    return run


def _out_dir(run: RunConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or run.paths.out or "runs/out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _param_line(cfg) -> str:
    from .model import temporal_param_counts

    c = temporal_param_counts(cfg)
    return (
        f"temporal params: transformer={c['transformer']:,} cnn3d={c['cnn3d']:,} "
        f"ratio={c['cnn3d'] / c['transformer']:.3f}"
    )


# -- commands ------------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .data import synth_generate

    run = _resolve(args)
    out = _out_dir(run, args)
    m = synth_generate(args.seed if args.seed is not None else run.seed, args.subjects, run.model, out, run.dsp)
    _out(f"generated {len(m.samples)} subjects (preset {run.preset}, seed {m.seed}) in {out}")
    _out(f"motion shape {list(run.model.motion_shape)}  audio {run.dsp.sample_rate} Hz")
    _out("---")
    _out("subject_id,tag,sha256")
    for s in m.samples:
        _out(f"{s['subject_id']},{s['tag']},{s['sha256']}")
    write_run_manifest(out, "gen-data", args)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import build_pairs, load_manifest
    from .plotting import pairs_png, training_curves_png
    from .training import evaluate, train

    run = _resolve(args, need_data=True)
    out = _out_dir(run, args)
    save_config(out / "config.yaml", run)
    manifest = load_manifest(run.paths.data)
    pairs = build_pairs(manifest, run.model, run.dsp, n_crops=run.data.n_crops)
    _out(f"training {run.model.temporal} (GAN {'on' if run.loss.gan_enabled else 'off'}) on {len(pairs)} pairs")
    _out(_param_line(run.model))

    def progress(row):
        if not args.quiet:
            _out("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    try:
        res = train(pairs, run.model, run.loss, run.optim, out_dir=out, progress=progress)
    except TrainingAborted as exc:
        _err(f"{exc}; last good state in {exc.checkpoint_path}")
        write_run_manifest(out, "train", args)
        return EXIT_ABORT
    training_curves_png(res.history, out / "training_curves.png")
    preds = evaluate(res.translator, pairs.motion[:4], pairs.target[:4])["pred"]
    pairs_png(preds[:, 0], pairs.target[:4, 0], out / "train_examples.png", labels=pairs.subject_ids[:4])
    _out("---")
    _out(f"steps={res.steps} epochs={res.epochs} stopped_early={res.stopped_early}")
    _out(f"initial: l1={res.initial['l1']:.5f} corr2d={res.initial['corr2d']:.4f}")
    _out(f"final:   l1={res.final['l1']:.5f} corr2d={res.final['corr2d']:.4f}")
    _out(f"checkpoint {res.checkpoint_path}")
    write_run_manifest(out, "train", args)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import read_tensor, write_tensor
    from .dsp import MelSpectrogram, mel_to_audio, write_wav
    from .numerics import no_grad
    from .plotting import spectrogram_png
    from .training import load_checkpoint

    expected = load_config(args.config).model if args.config else None
    ckpt = load_checkpoint(args.checkpoint, expected=expected)
    if not Path(args.input).exists():
        raise FileNotFoundError(args.input)
    motion = read_tensor(args.input)
    cfg = ckpt.model_config
    if motion.ndim == 5:
        motion = motion[None]
    if tuple(motion.shape[1:]) != cfg.motion_shape:
        raise InputError(f"motion shape {tuple(motion.shape[1:])} does not match checkpoint config {cfg.motion_shape}")
    run = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    translator = ckpt.build_translator()
    t0 = time.perf_counter()
    with no_grad():
        spec = translator(motion.astype(cfg.dtype)).data[0, 0]
    elapsed = time.perf_counter() - t0
    write_tensor(out / "spectrogram.m2st", spec)
    spectrogram_png(spec, out / "spectrogram.png", title="predicted mel spectrogram")
    mel = MelSpectrogram(spec.astype(np.float64), run.dsp.db_floor, run.dsp.db_ceil)
    wav = mel_to_audio(mel, run.dsp, length=run.dsp.crop_len)
    write_wav(out / "audio.wav", wav)
    _out(f"spectrogram {spec.shape[0]}x{spec.shape[1]} -> {out / 'spectrogram.m2st'}")
    _out(f"audio {len(wav)} samples at {wav.sample_rate} Hz -> {out / 'audio.wav'}")
    _out(f"inference_seconds={elapsed:.4f}")
    write_run_manifest(out, "synth", args)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .experiment import run_loo
    from .metrics import EvalReport, format_table, save_reports
    from .model import temporal_param_counts
    from .plotting import eval_png

    base = _resolve(args, need_data=not args.reports)
    out = _out_dir(base, args)
    reports = [EvalReport.from_dict(r) for path in args.reports or [] for r in json.loads(Path(path).read_text()).get("reports", [json.loads(Path(path).read_text())])]
    failed = False
    if not args.reports:
        if not (args.train_all or args.checkpoint_dir):
            raise ConfigError("eval needs --train-all, --checkpoint-dir or --reports")
        manifest = load_manifest(base.paths.data)
        temporals = args.temporals.split(",") if args.temporals else [base.model.temporal]
        gans = args.gans.split(",") if args.gans else ["on" if base.loss.gan_enabled else "off"]
        for temporal in temporals:
            for gan in gans:
                if gan not in ("on", "off"):
                    raise ConfigError(f"--gans entries must be on/off, got {gan!r}")
                run = base.override("model", temporal=temporal).override("loss", gan_enabled=gan == "on")
                sub = out / f"{temporal}_gan-{gan}"
                save_config(sub.mkdir(parents=True, exist_ok=True) or sub / "config.yaml", run)
                _out(f"== {temporal}, GAN {gan}: {args.loo or 'all'} folds")
                rep = run_loo(
                    manifest,
                    run,
                    sub,
                    n_folds=args.loo,
                    checkpoint_dir=(Path(args.checkpoint_dir) / sub.name if args.checkpoint_dir and len(temporals) * len(gans) > 1 else args.checkpoint_dir),
                    with_audio=not args.no_audio,
                    log=_out,
                )
                reports.append(rep)
                failed |= bool(rep.failures)
    counts = temporal_param_counts(base.model)
    save_reports(out / "eval_report.json", reports, counts)
    table = format_table(reports, counts)
    (out / "eval_table.txt").write_text(table + "\n")
    if reports:
        eval_png(reports, out / "eval_corr2d.png")
    _out("---")
    _out(table)
    write_run_manifest(out, "eval", args)
    if failed:
        _err("at least one fold failed; partial report written")
        return EXIT_ABORT
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import bench_csv, bench_ratios, benchmark_attention
    from .plotting import benchmark_png

    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    if not lengths or min(lengths) < 1:
        raise ConfigError("--lengths must be a comma-separated list of positive integers")
    rows = benchmark_attention(lengths, d=args.d, window=args.w, repetitions=args.reps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = bench_csv(rows)
    (out / "bench.csv").write_text(text)
    if rows:
        benchmark_png(rows, out / "bench.png")
    ratios = bench_ratios(rows)
    _out(text.rstrip())
    _out("---")
    w, dn = ratios.get("windowed"), ratios.get("dense")
    if w is None:
        _out("ratio windowed=n/a dense=n/a (need at least two lengths)")
    else:
        lo, hi = min(lengths), max(lengths)
        verdict = "PASS" if w <= 6 else "FAIL"
        _out(f"ratio T={hi}/T={lo}: windowed={w:.2f} dense={dn:.2f} -> {verdict} (windowed <= 6)")
    write_run_manifest(out, "bench", args)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------
def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motion2spec", description="Tongue-motion to mel-spectrogram translation.")
    p.add_argument("--threads", type=_positive, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--preset", choices=("desk", "paper"), default=None)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a translator on a dataset")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--gan", choices=("on", "off"))
    t.add_argument("--temporal", choices=("transformer", "cnn3d"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--max-steps", type=_positive)
    t.add_argument("--batch-size", type=_positive)
    t.add_argument("--crops", type=_positive, help="audio crops per subject")
    t.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="motion file -> spectrogram, PNG and WAV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--config", help="reject checkpoints whose model config differs from this one")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="leave-one-out evaluation")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--checkpoint-dir")
    src.add_argument("--train-all", action="store_true")
    src.add_argument("--reports", nargs="+", help="combine existing report JSON files into one table")
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--loo", type=_positive, default=None, help="number of folds (default: every subject)")
    e.add_argument("--out", required=True)
    e.add_argument("--gan", choices=("on", "off"))
    e.add_argument("--temporal", choices=("transformer", "cnn3d"))
    e.add_argument("--temporals", help="comma list, e.g. transformer,cnn3d")
    e.add_argument("--gans", help="comma list, e.g. on,off")
    e.add_argument("--seed", type=int)
    e.add_argument("--max-steps", type=_positive)
    e.add_argument("--epochs", type=_positive)
    e.add_argument("--crops", type=_positive)
    e.add_argument("--no-audio", action="store_true", help="skip Griffin-Lim and the waveform metric")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="windowed vs dense attention timing")
    b.add_argument("--lengths", default="64,128,256")
    b.add_argument("--d", type=_positive, default=64)
    b.add_argument("--w", type=_positive, default=3)
    b.add_argument("--reps", type=int, default=9)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if n is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional dependency
        _err("threadpoolctl not installed; --threads ignored")
        yield
        return
    with threadpool_limits(limits=n):
        yield


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ConfigError, UnknownSubjectError) as exc:
        _err(f"invalid configuration: {exc}")
        return EXIT_USAGE
    except (IntegrityError, IncompatibleCheckpointError, FormatError) as exc:
        _err(f"checkpoint/file rejected: {exc}")
        return EXIT_CHECKPOINT
    except TrainingAborted as exc:
        _err(str(exc))
        return EXIT_ABORT
    except (FileNotFoundError, InputError, OSError) as exc:
        _err(f"input/output failure: {exc}")
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
