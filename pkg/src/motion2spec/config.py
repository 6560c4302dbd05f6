"""Run configuration: a YAML file with nested sections, overridable from the CLI.

Example::

    preset: desk
    seed: 0
    model: {temporal: transformer}
    optim: {batch_size: 4, max_steps: 500}
    loss: {gan_enabled: false}
    data: {n_crops: 1}
    paths: {data: runs/data, out: runs/train}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .dsp import DspConfig
from .errors import ConfigError
from .model import ModelConfig, preset as model_preset
from .training import LossConfig, OptimConfig


@dataclass(frozen=True)
class DataConfig:
    n_crops: int = 1
    subjects: int = 8

    def __post_init__(self):
        if self.n_crops < 1:
            raise ConfigError("n_crops must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    data: Optional[str] = None
    out: Optional[str] = None


SECTIONS = {"model", "optim", "loss", "dsp", "data", "paths"}
TOP_LEVEL = SECTIONS | {"preset", "seed"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        for name in SECTIONS:
            if raw.get(name) is not None and not isinstance(raw[name], dict):
                raise ConfigError(f"section [{name}] must be a mapping")
        name = raw.get("preset", "desk")
        seed = int(raw.get("seed", 0))
        model_vals = dict(raw.get("model") or {})
        model_vals.pop("preset", None)
        try:
            model = model_preset(name, **model_vals)
        except TypeError as exc:
            raise ConfigError(f"[model]: {exc}") from None
        optim_vals = dict(raw.get("optim") or {})
        optim_vals.setdefault("seed", seed)
        return cls(
            preset=name,
            seed=seed,
            model=model,
            optim=_build(OptimConfig, optim_vals, "optim"),
            loss=_build(LossConfig, dict(raw.get("loss") or {}), "loss"),
            dsp=_build(DspConfig, dict(raw.get("dsp") or {}), "dsp"),
            data=_build(DataConfig, dict(raw.get("data") or {}), "data"),
            paths=_build(PathsConfig, dict(raw.get("paths") or {}), "paths"),
        )

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "loss": asdict(self.loss),
            "dsp": asdict(self.dsp),
            "data": asdict(self.data),
            "paths": asdict(self.paths),
        }

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with some fields of one section replaced (``None`` values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        try:
            return replace(self, **{section: replace(current, **values)})
        except TypeError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
