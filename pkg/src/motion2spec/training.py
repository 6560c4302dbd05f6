"""Losses, Adam, the alternating adversarial training loop and checkpoint files."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import binio
from .data import PairSet
from .dsp import MelSpectrogram
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    IncompatibleCheckpointError,
    IntegrityError,
    NumericError,
    TrainingAborted,
)
from .metrics import corr2d
from .model import Discriminator, ModelConfig, Translator
from .numerics import Tensor, abs_, backward, clip, log, mean, neg, no_grad, sub

PROB_CLAMP = 1e-7
ADVERSARIAL_FORMS = ("literal", "fool")


# -- configs ----------------------------------------------------------------------------
def _from_dict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class LossConfig:
    """``adversarial`` picks the translator's GAN term.

    ``literal`` (default) is ``mean(-log(1 - D(fake)))`` as written, which drives
    ``D(fake)`` toward 0. ``fool`` swaps in the non-saturating ``mean(-log D(fake))``,
    which drives it toward 1. Select it with ``loss: {adversarial: fool}`` in the YAML.
    """

    beta: float = 1.0
    gan_enabled: bool = True
    adversarial: str = "literal"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.adversarial not in ADVERSARIAL_FORMS:
            raise ConfigError(f"adversarial must be one of {ADVERSARIAL_FORMS}")

    to_dict = asdict

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return _from_dict(cls, d, "loss")


@dataclass(frozen=True)
class OptimConfig:
    lr_translator: float = 1e-3
    lr_discriminator: float = 1e-4
    momentum_beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    max_steps: Optional[int] = None
    # stop at the end of an epoch once both hold (either may be None)
    stop_l1_ratio: Optional[float] = None
    stop_corr2d: Optional[float] = None

    def __post_init__(self):
        if not (self.lr_translator > 0 and self.lr_discriminator > 0):
            raise ConfigError("learning rates must be > 0")
        if not (0 <= self.momentum_beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decay rates must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")

    to_dict = asdict

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return _from_dict(cls, d, "optim")


# -- losses -------------------------------------------------------------------------------
def _values(x):
    if isinstance(x, MelSpectrogram):
        return x.values
    return x


def l1_loss(pred, target) -> Tensor:
    pred, target = _values(pred), _values(target)
    ps = pred.shape if hasattr(pred, "shape") else np.shape(pred)
    ts = target.shape if hasattr(target, "shape") else np.shape(target)
    if tuple(ps) != tuple(ts):
        raise DimensionError(f"l1_loss: shapes differ {tuple(ps)} vs {tuple(ts)}")
    return mean(abs_(sub(pred, target)))


def _probs(d, what: str) -> Tensor:
    d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=np.float64))
    if d.size == 0:
        raise ContractError(f"{what}: empty batch")
    return clip(d, PROB_CLAMP, 1.0 - PROB_CLAMP)


def discriminator_loss(d_real, d_fake) -> Tensor:
    """``-mean(log D(real)) - mean(log(1 - D(fake)))``."""
    real, fake = _probs(d_real, "discriminator_loss"), _probs(d_fake, "discriminator_loss")
    return neg(mean(log(real))) - mean(log(1.0 - fake))


def translator_loss(d_fake, l1, beta: float = 1.0) -> Tensor:
    """``mean(-log(1 - D(fake))) + beta * l1``."""
    if not beta >= 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    fake = _probs(d_fake, "translator_loss")
    return neg(mean(log(1.0 - fake))) + beta * l1


def fooling_loss(d_fake, l1, beta: float = 1.0) -> Tensor:
    """``mean(-log D(fake)) + beta * l1``: rewards fakes the discriminator calls real."""
    if not beta >= 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    fake = _probs(d_fake, "fooling_loss")
    return neg(mean(log(fake))) + beta * l1


def adversarial_translator_loss(d_fake, l1, cfg: LossConfig) -> Tensor:
    fn = fooling_loss if cfg.adversarial == "fool" else translator_loss
    return fn(d_fake, l1, cfg.beta)


# -- optimizer -----------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: OptimConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> array).

    Parameters without a gradient entry are left untouched. A non-finite
    gradient raises NumericError naming the parameter, before anything moves.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = cfg.momentum_beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)


class Adam:
    def __init__(self, module, lr: float, cfg: OptimConfig):
        self.module, self.lr, self.cfg = module, lr, cfg
        self.state = AdamState()

    def step(self) -> None:
        named = dict(self.module.named_parameters())
        optimizer_step(
            {n: p.data for n, p in named.items()},
            {n: p.grad for n, p in named.items() if p.grad is not None},
            self.state,
            self.lr,
            self.cfg,
        )


# -- checkpoints ----------------------------------------------------------------------------
CKPT_MAGIC = b"M2SC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    translator: dict
    discriminator: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # {"T": AdamState, "D": AdamState}
    epoch: int = 0
    step: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def build_translator(self) -> Translator:
        t = Translator(self.model_config)
        t.load_state_dict(self.translator)
        return t


def _entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    return struct.pack("<I", len(raw)) + raw + binio.pack_array(arr)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = [("T/" + k, v) for k, v in ckpt.translator.items()]
    entries += [("D/" + k, v) for k, v in ckpt.discriminator.items()]
    steps = {}
    for group, st in ckpt.optimizer.items():
        steps[group] = st.t
        entries += [(f"opt/{group}/m/{k}", v) for k, v in st.m.items()]
        entries += [(f"opt/{group}/v/{k}", v) for k, v in st.v.items()]
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "optimizer_steps": steps,
        "extra": ckpt.extra,
    }
    entries.append(("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)))
    body = struct.pack("<I", CKPT_VERSION) + ckpt.model_config.hash() + struct.pack("<I", len(entries))
    body += b"".join(_entry(n, a) for n, a in entries)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    binio.atomic_write(path, binio.frame(CKPT_MAGIC, body))


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` guards against a config mismatch."""
    blob = Path(path).read_bytes()
    body = binio.unframe(blob, CKPT_MAGIC, str(path))
    r = binio.Reader(body, str(path))
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint format version {version}, this build reads {CKPT_VERSION}")
    digest = r.take(32)
    if expected is not None and digest != expected.hash():
        raise IncompatibleCheckpointError(
            f"{path}: config hash {digest.hex()[:16]}… does not match expected {expected.hash().hex()[:16]}…"
        )
    (count,) = r.unpack("<I")
    tables = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        tables[name] = r.array()
    r.done()
    if "meta" not in tables:
        raise IntegrityError(f"{path}: metadata entry missing")
    meta = json.loads(tables.pop("meta").tobytes().decode())
    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.hash() != digest:
        raise IntegrityError(f"{path}: stored config does not match header hash")
    groups = {"T": {}, "D": {}}
    opt = {g: AdamState(t=int(t)) for g, t in meta.get("optimizer_steps", {}).items()}
    for name, arr in tables.items():
        head, _, rest = name.partition("/")
        if head in groups:
            groups[head][rest] = arr
        elif head == "opt":
            g, kind, pname = rest.split("/", 2)
            getattr(opt.setdefault(g, AdamState()), kind)[pname] = arr
    return Checkpoint(cfg, groups["T"], groups["D"], opt, meta["epoch"], meta["step"], meta.get("rng_state"), meta.get("extra", {}))


# -- training loop ---------------------------------------------------------------------------
CSV_GAN = ["epoch", "step", "l1", "loss_T", "loss_D", "d_real_acc", "d_fake_acc", "corr2d_train"]
CSV_PLAIN = ["epoch", "step", "l1", "loss_T", "corr2d_train"]


@dataclass
class TrainResult:
    translator: Translator
    discriminator: Optional[Discriminator]
    history: list
    initial: dict
    final: dict
    steps: int
    epochs: int
    stopped_early: bool = False
    checkpoint_path: Optional[Path] = None
    csv_path: Optional[Path] = None


def evaluate(translator: Translator, motion: np.ndarray, target: np.ndarray, batch_size: int = 4) -> dict:
    """L1 and mean per-sample Corr2D of ``translator`` over a whole pair set."""
    preds = predict(translator, motion, batch_size)
    l1 = float(np.mean(np.abs(preds.astype(np.float64) - target)))
    corrs = [corr2d(p[0], t[0]) for p, t in zip(preds, target)]
    return {"l1": l1, "corr2d": float(np.mean(corrs)), "corr2d_per_sample": corrs, "pred": preds}


def predict(translator: Translator, motion: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, motion.shape[0], batch_size):
            out.append(translator(motion[i : i + batch_size]).data)
    return np.concatenate(out)


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def _checkpoint_of(model_cfg, T, D, optT, optD, epoch, step, rng, extra=None) -> Checkpoint:
    opt = {"T": optT.state}
    if optD is not None:
        opt["D"] = optD.state
    return Checkpoint(
        model_cfg,
        T.state_dict(),
        D.state_dict() if D is not None else {},
        opt,
        epoch,
        step,
        rng.bit_generator.state,
        extra or {},
    )


def train(
    pairs: PairSet,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    out_dir=None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Alternating training: a discriminator step on detached fakes, then a translator step.

    With ``gan_enabled = False`` the translator minimizes plain L1 and no
    discriminator is built. One CSV row is logged per epoch from the batches of
    that epoch. With ``out_dir`` set, ``metrics.csv`` and ``checkpoint.m2sc``
    are written there; on a non-finite loss the last good state is saved to
    ``checkpoint.m2sc`` and TrainingAborted is raised.
    """
    if len(pairs) == 0:
        raise ContractError("training set is empty")
    if tuple(pairs.motion.shape[1:]) != model_cfg.motion_shape:
        raise DimensionError(f"motion {pairs.motion.shape[1:]} does not match config {model_cfg.motion_shape}")
    gan = loss_cfg.gan_enabled
    T = Translator(model_cfg, seed=optim_cfg.seed)
    D = Discriminator(model_cfg, seed=optim_cfg.seed + 1) if gan else None
    optT = Adam(T, optim_cfg.lr_translator, optim_cfg)
    optD = Adam(D, optim_cfg.lr_discriminator, optim_cfg) if gan else None
    rng = np.random.default_rng(optim_cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = csv_path = None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path, csv_path = out / "checkpoint.m2sc", out / "metrics.csv"
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_GAN if gan else CSV_PLAIN)

    initial = evaluate(T, pairs.motion, pairs.target, optim_cfg.batch_size)
    initial.pop("pred")
    history, step, epoch, stopped = [], 0, 0, False
    N, bs = len(pairs), optim_cfg.batch_size

    def abort(reason: str):
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, _checkpoint_of(model_cfg, T, D, optT, optD, epoch, step, rng, {"aborted": reason}))
        if fh is not None:
            fh.close()
        raise TrainingAborted(f"training aborted at step {step + 1}: {reason}", checkpoint_path=ckpt_path)

    try:
        for epoch in range(1, optim_cfg.epochs + 1):
            order = rng.permutation(N)
            acc = {"l1": [], "loss_T": [], "loss_D": [], "real_hits": 0, "fake_hits": 0, "n": 0, "corr": []}
            for b0 in range(0, N, bs):
                if optim_cfg.max_steps is not None and step >= optim_cfg.max_steps:
                    break
                idx = order[b0 : b0 + bs]
                x, y = pairs.motion[idx], pairs.target[idx]
                try:
                    fake = T(x)
                    if gan:
                        D.zero_grad()
                        d_real = D(y)
                        d_fake_det = D(Tensor(fake.data))
                        loss_d = discriminator_loss(d_real, d_fake_det)
                        if not math.isfinite(loss_d.item()):
                            abort("non-finite discriminator loss")
                        backward(loss_d)
                        optD.step()
                        acc["loss_D"].append(loss_d.item())
                        acc["real_hits"] += int(np.sum(d_real.data > 0.5))
                        acc["fake_hits"] += int(np.sum(d_fake_det.data < 0.5))
                    l1 = l1_loss(fake, y)
                    if gan:
                        loss_t = adversarial_translator_loss(D(fake), l1, loss_cfg)
                    else:
                        loss_t = l1
                    if not math.isfinite(loss_t.item()):
                        abort("non-finite translator loss")
                    T.zero_grad()
                    backward(loss_t)
                    optT.step()
                except NumericError as exc:
                    abort(str(exc))
                step += 1
                acc["l1"].append(l1.item())
                acc["loss_T"].append(loss_t.item())
                acc["n"] += len(idx)
                acc["corr"] += [corr2d(p[0], t[0]) for p, t in zip(fake.data, y)]
            if not acc["l1"]:
                epoch -= 1
                break
            row = {
                "epoch": epoch,
                "step": step,
                "l1": float(np.mean(acc["l1"])),
                "loss_T": float(np.mean(acc["loss_T"])),
                "corr2d_train": float(np.mean(acc["corr"])),
            }
            if gan:
                row["loss_D"] = float(np.mean(acc["loss_D"]))
                row["d_real_acc"] = acc["real_hits"] / acc["n"]
                row["d_fake_acc"] = acc["fake_hits"] / acc["n"]
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in (CSV_GAN if gan else CSV_PLAIN)])
                fh.flush()
            if progress is not None:
                progress(row)
            if _should_stop(row, initial, optim_cfg):
                stopped = True
                break
            if optim_cfg.max_steps is not None and step >= optim_cfg.max_steps:
                break
    finally:
        if fh is not None and not fh.closed:
            fh.close()

    final = evaluate(T, pairs.motion, pairs.target, optim_cfg.batch_size)
    final.pop("pred")
    if ckpt_path is not None:
        extra = {"loss_config": loss_cfg.to_dict(), "optim_config": optim_cfg.to_dict(), "final": {k: final[k] for k in ("l1", "corr2d")}}
        save_checkpoint(ckpt_path, _checkpoint_of(model_cfg, T, D, optT, optD, epoch, step, rng, extra))
    return TrainResult(T, D, history, initial, final, step, epoch, stopped, ckpt_path, csv_path)


def _should_stop(row: dict, initial: dict, cfg: OptimConfig) -> bool:
    if cfg.stop_l1_ratio is None and cfg.stop_corr2d is None:
        return False
    ok = True
    if cfg.stop_l1_ratio is not None:
        ok &= row["l1"] <= cfg.stop_l1_ratio * initial["l1"]
    if cfg.stop_corr2d is not None:
        ok &= row["corr2d_train"] >= cfg.stop_corr2d
    return bool(ok)
