"""Translator (3D-CNN frame encoder -> temporal module -> 2D decoder) and discriminator.

Motion sequences are laid out ``[3, D, H, W, T]`` (one displacement vector per
voxel per frame), batched as ``[B, 3, D, H, W, T]``. Every frame goes through
the same 3D CNN, producing a ``[C, 4, 4]`` feature; the temporal module fuses
the ``T`` features with their time indices into one ``[C, 4, 4]`` map that the
transposed-convolution decoder turns into a ``[1, 64, 64]`` spectrogram.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (
    Tensor,
    conv,
    conv2d_transpose,
    layer_norm,
    leaky_relu,
    linear,
    maxpool3d,
    mean,
    relu,
    reshape,
    sigmoid,
    sliding_window_attention,
    take,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    frame_shape: tuple = (32, 32, 32)
    n_frames: int = 8
    encoder_channels: tuple = (8, 16, 32)
    depth_reduce: str = "mean"
    temporal: str = "transformer"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    window: int = 3
    d_ff: int = 64
    cnn3d_width: int = 64
    cnn3d_blocks: int = 3
    decoder_channels: tuple = (96, 24, 4, 1)
    disc_channels: tuple = (16, 32, 64, 128)
    disc_slope: float = 0.2
    decoder_init: str = "bilinear"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "frame_shape", tuple(int(v) for v in self.frame_shape))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))
        object.__setattr__(self, "disc_channels", tuple(int(v) for v in self.disc_channels))
        if len(self.frame_shape) != 3:
            raise ConfigError("frame_shape must be (D, H, W)")
        factor = 2 ** len(self.encoder_channels)
        if any(s % factor for s in self.frame_shape):
            raise ConfigError(f"frame dims {self.frame_shape} must be divisible by 2^{len(self.encoder_channels)}")
        if self.frame_shape[1] != self.frame_shape[2]:
            raise ConfigError("frame height and width must match")
        if self.depth_reduce not in ("mean", "max"):
            raise ConfigError("depth_reduce must be 'mean' or 'max'")
        if self.temporal not in ("transformer", "cnn3d"):
            raise ConfigError("temporal must be 'transformer' or 'cnn3d'")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("attention window must be odd and >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not self.decoder_channels or self.decoder_channels[-1] != 1:
            raise ConfigError("decoder schedule must end in 1 channel")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.decoder_init not in ("bilinear", "he"):
            raise ConfigError("decoder_init must be 'bilinear' or 'he'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def feature_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def feature_side(self) -> int:
        return self.frame_shape[1] // 2 ** len(self.encoder_channels)

    @property
    def output_side(self) -> int:
        return self.feature_side * 2 ** len(self.decoder_channels)

    @property
    def motion_shape(self) -> tuple:
        return (3,) + self.frame_shape + (self.n_frames,)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def hash(self) -> bytes:
        """32-byte SHA-256 of the canonical JSON form."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def paper_preset(**overrides) -> ModelConfig:
    base = ModelConfig(
        preset="paper",
        frame_shape=(128, 128, 128),
        n_frames=26,
        encoder_channels=(32, 32, 64, 64, 128),
        d_model=256,
        n_heads=4,
        n_layers=3,
        window=3,
        d_ff=256,
        cnn3d_width=256,
        cnn3d_blocks=3,
    )
    return replace(base, **overrides)


def desk_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- module plumbing -----------------------------------------------------------
class Module:
    """Holds named parameter tensors; submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing, unexpected = set(own) - set(state), set(state) - set(own)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Init:
    """Deterministic parameter factory."""

    def __init__(self, seed: int, dtype: str = "float32"):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def uniform(self, shape, fan_in: float, gain: float = math.sqrt(2.0)) -> Tensor:
        bound = gain * math.sqrt(3.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

    def normal(self, shape, std: float) -> Tensor:
        return Tensor((self.rng.standard_normal(shape) * std).astype(self.dtype), requires_grad=True)


def count_params(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def _trace(trace: Optional[list], name: str, t: Tensor) -> None:
    if trace is not None:
        trace.append((name, tuple(t.shape)))


# -- layers ----------------------------------------------------------------------
class Linear(Module):
    def __init__(self, init: Init, d_in: int, d_out: int, gain: float = 1.0):
        self.weight = init.uniform((d_in, d_out), fan_in=d_in, gain=gain)
        self.bias = init.zeros((d_out,))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, d: int):
        self.gain = init.ones((d,))
        self.bias = init.zeros((d,))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class Conv(Module):
    def __init__(self, init: Init, c_in: int, c_out: int, kernel: int, nd: int, stride=1, padding=0, gain=math.sqrt(2.0)):
        self.weight = init.uniform((c_out, c_in) + (kernel,) * nd, fan_in=c_in * kernel**nd, gain=gain)
        self.bias = init.zeros((c_out,))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, init: Init, c_in: int, c_out: int, kernel: int = 4, stride: int = 2, padding: int = 1, scheme: str = "he"):
        if scheme == "bilinear" and (kernel, stride) == (4, 2):
            # random channel mixing times a bilinear upsampling kernel: both
            # output phases start with unit gain, so no initial checkerboard
            mix = init.uniform((c_in, c_out), fan_in=c_in).data
            k1 = np.array([0.25, 0.75, 0.75, 0.25], dtype=init.dtype)
            w = mix[:, :, None, None] * np.outer(k1, k1)[None, None]
            self.weight = Tensor(w.astype(init.dtype), requires_grad=True)
        else:
            # each output pixel receives (kernel / stride)^2 input taps
            fan_in = c_in * (kernel // stride) ** 2
            self.weight = init.uniform((c_in, c_out, kernel, kernel), fan_in=fan_in)
        self.bias = init.zeros((c_out,))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d_transpose(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# -- translator parts ------------------------------------------------------------
class FrameEncoder(Module):
    """Per-frame spatial model: blocks of Conv3D(k3, s1, p1) -> ReLU -> MaxPool(2)."""

    def __init__(self, cfg: ModelConfig, init: Init):
        self.cfg = cfg
        chans = (3,) + cfg.encoder_channels
        self.blocks = [Conv(init, a, b, 3, nd=3, padding=1) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, frames, trace: Optional[list] = None):
        """``[N, 3, D, H, W]`` (or unbatched) -> ``[N, C, h, w]``."""
        x = frames
        for i, block in enumerate(self.blocks):
            x = relu(block(x))
            _trace(trace, f"encoder.conv{i}", x)
            x = maxpool3d(x)
            _trace(trace, f"encoder.pool{i}", x)
        depth_axis = x.ndim - 3
        if self.cfg.depth_reduce == "mean":
            x = mean(x, axis=depth_axis)
        else:
            x = _max_over(x, depth_axis)
        _trace(trace, "encoder.depth_reduce", x)
        return x


def _max_over(x: Tensor, axis: int) -> Tensor:
    arg = x.data.argmax(axis=axis)
    index = [np.arange(n).reshape([-1 if i == j else 1 for j in range(arg.ndim)]) for i, n in enumerate(arg.shape)]
    index.insert(axis, arg)
    return x[tuple(index)]


class TransformerLayer(Module):
    """Pre-norm block: windowed multi-head self-attention, then a ReLU feed-forward."""

    def __init__(self, cfg: ModelConfig, init: Init):
        d = cfg.d_model
        self.n_heads, self.window = cfg.n_heads, cfg.window
        self.ln_attn = LayerNorm(init, d)
        self.query = Linear(init, d, d)
        self.key = Linear(init, d, d)
        self.value = Linear(init, d, d)
        self.out = Linear(init, d, d)
        self.ln_ff = LayerNorm(init, d)
        self.ff_in = Linear(init, d, cfg.d_ff, gain=math.sqrt(2.0))
        self.ff_out = Linear(init, cfg.d_ff, d)

    def _heads(self, x, B, T):
        d = x.shape[-1]
        return transpose(reshape(x, (B, T, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def forward(self, x, positions):
        B, T, d = x.shape
        h = self.ln_attn(x)
        q, k, v = (self._heads(f(h), B, T) for f in (self.query, self.key, self.value))
        att = sliding_window_attention(q, k, v, self.window, positions=positions)
        att = reshape(transpose(att, (0, 2, 1, 3)), (B, T, d))
        x = x + self.out(att)
        x = x + self.ff_out(relu(self.ff_in(self.ln_ff(x))))
        return x


class TemporalTransformer(Module):
    """Tokens are flattened frame features; learned per-index positions; mean-pooled output."""

    def __init__(self, cfg: ModelConfig, init: Init):
        self.cfg = cfg
        token = cfg.feature_channels * cfg.feature_side**2
        self.embed = Linear(init, token, cfg.d_model)
        self.positions = init.normal((cfg.n_frames, cfg.d_model), std=0.02)
        self.layers = [TransformerLayer(cfg, init) for _ in range(cfg.n_layers)]
        self.ln_final = LayerNorm(init, cfg.d_model)
        self.project = Linear(init, cfg.d_model, token)

    def forward(self, features, indices: Optional[Sequence[int]] = None, trace: Optional[list] = None):
        """``[B, T, C, h, w]`` features with 1-based time ``indices`` -> ``[B, C, h, w]``."""
        B, T = features.shape[:2]
        rest = features.shape[2:]
        indices = np.arange(1, T + 1) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.shape[0] != T:
            raise DimensionError(f"{indices.shape[0]} indices for {T} frames")
        if indices.min() < 1 or indices.max() > self.cfg.n_frames:
            raise DimensionError(f"time indices must lie in 1..{self.cfg.n_frames}")
        x = self.embed(reshape(features, (B, T, -1)))
        x = x + take(self.positions, indices - 1, axis=0)
        for i, layer in enumerate(self.layers):
            x = layer(x, indices)
            _trace(trace, f"temporal.layer{i}", x)
        pooled = mean(self.ln_final(x), axis=1)
        out = reshape(self.project(pooled), (B,) + tuple(rest))
        _trace(trace, "temporal.out", out)
        return out


class Temporal3DCNN(Module):
    """Baseline temporal model: 3D convolutions over the (h, w, T) grid, time stride 2, then time mean."""

    def __init__(self, cfg: ModelConfig, init: Init):
        self.cfg = cfg
        c, wdt = cfg.feature_channels, cfg.cnn3d_width
        chans = [c] + [wdt] * (cfg.cnn3d_blocks - 1) + [c]
        self.blocks = [
            Conv(init, a, b, 3, nd=3, stride=(1, 1, 2), padding=1, gain=math.sqrt(2.0) if i < cfg.cnn3d_blocks - 1 else 1.0)
            for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
        ]

    @property
    def min_frames(self) -> int:
        return 2 ** (self.cfg.cnn3d_blocks - 1)

    def forward(self, features, indices: Optional[Sequence[int]] = None, trace: Optional[list] = None):
        B, T = features.shape[:2]
        if T < self.min_frames:
            raise ConfigError(f"cnn3d temporal module needs T >= {self.min_frames}, got {T}")
        if indices is not None:
            order = np.argsort(np.asarray(indices).reshape(-1), kind="stable")
            if not np.array_equal(order, np.arange(T)):
                features = take(features, order, axis=1)
        x = transpose(features, (0, 2, 3, 4, 1))  # [B, C, h, w, T]
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < last:
                x = relu(x)
            _trace(trace, f"temporal.conv{i}", x)
        out = mean(x, axis=4)
        _trace(trace, "temporal.out", out)
        return out


class Decoder(Module):
    """Transposed convolutions (k4, s2, p1), each doubling the side; sigmoid at the end."""

    def __init__(self, cfg: ModelConfig, init: Init):
        chans = (cfg.feature_channels,) + cfg.decoder_channels
        self.stages = [ConvTranspose2d(init, a, b, scheme=cfg.decoder_init) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, rep, trace: Optional[list] = None):
        x = rep
        last = len(self.stages) - 1
        for i, stage in enumerate(self.stages):
            x = stage(x)
            x = sigmoid(x) if i == last else relu(x)
            _trace(trace, f"decoder.stage{i}", x)
        return x


class Translator(Module):
    """Motion sequence ``[B, 3, D, H, W, T]`` -> spectrogram ``[B, 1, 64, 64]``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        init = Init(seed, cfg.dtype)
        self.encoder = FrameEncoder(cfg, init)
        temporal_cls = TemporalTransformer if cfg.temporal == "transformer" else Temporal3DCNN
        self.temporal = temporal_cls(cfg, init)
        self.decoder = Decoder(cfg, init)

    def encode_frames(self, x, trace: Optional[list] = None):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.ndim == 5:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 6 or x.shape[1] != 3:
            raise DimensionError(f"motion must be [B, 3, D, H, W, T], got {x.shape}")
        if tuple(x.shape[2:5]) != self.cfg.frame_shape:
            raise DimensionError(f"frame shape {x.shape[2:5]} does not match config {self.cfg.frame_shape}")
        B, T = x.shape[0], x.shape[5]
        frames = reshape(transpose(x, (0, 5, 1, 2, 3, 4)), (B * T, 3) + self.cfg.frame_shape)
        feats = self.encoder(frames, trace=trace)
        return reshape(feats, (B, T) + feats.shape[1:])

    def forward(self, x, indices: Optional[Sequence[int]] = None, trace: Optional[list] = None):
        feats = self.encode_frames(x, trace=trace)
        rep = self.temporal(feats, indices=indices, trace=trace)
        return self.decoder(rep, trace=trace)

    def param_report(self) -> dict:
        return {
            "encoder": count_params(self.encoder),
            "temporal": count_params(self.temporal),
            "decoder": count_params(self.decoder),
            "total": count_params(self),
        }


class Discriminator(Module):
    """Stride-2 conv blocks with LeakyReLU, then an affine map to one logit and a sigmoid."""

    def __init__(self, cfg: ModelConfig, seed: int = 1):
        init = Init(seed, cfg.dtype)
        self.slope = cfg.disc_slope
        chans = (1,) + cfg.disc_channels
        self.blocks = [Conv(init, a, b, 4, nd=2, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])]
        side = cfg.output_side // 2 ** len(cfg.disc_channels)
        self.head = Linear(init, chans[-1] * side * side, 1)

    def forward(self, spec):
        """``[B, 1, S, S]`` in [0, 1] -> probabilities ``[B]``."""
        x = spec if isinstance(spec, Tensor) else Tensor(spec)
        if x.ndim == 2:
            x = reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        for block in self.blocks:
            x = leaky_relu(block(x), self.slope)
        logits = self.head(reshape(x, (x.shape[0], -1)))
        return reshape(sigmoid(logits), (x.shape[0],))


def temporal_param_counts(cfg: ModelConfig) -> dict:
    """Parameter counts of both temporal modules under ``cfg`` (data-free)."""
    init = Init(0, "float32")
    return {
        "transformer": count_params(TemporalTransformer(cfg, init)),
        "cnn3d": count_params(Temporal3DCNN(cfg, init)),
    }


# -- symbolic shape trace ------------------------------------------------------------
def shape_trace(cfg: ModelConfig) -> list:
    """Layer-by-layer output shapes of ``translate`` for one sequence, without running it."""
    out = []
    c_prev, sp = 3, cfg.frame_shape
    for i, c in enumerate(cfg.encoder_channels):
        out.append((f"encoder.conv{i}", (c,) + sp))
        if any(s % 2 for s in sp):
            raise ConfigError(f"encoder block {i}: {sp} not divisible by 2")
        sp = tuple(s // 2 for s in sp)
        out.append((f"encoder.pool{i}", (c,) + sp))
        c_prev = c
    feat = (c_prev,) + sp[1:]
    out.append(("encoder.depth_reduce", feat))
    if cfg.temporal == "transformer":
        for i in range(cfg.n_layers):
            out.append((f"temporal.layer{i}", (cfg.n_frames, cfg.d_model)))
    else:
        t = cfg.n_frames
        chans = [cfg.cnn3d_width] * (cfg.cnn3d_blocks - 1) + [c_prev]
        for i, c in enumerate(chans):
            t = (t + 2 - 3) // 2 + 1
            out.append((f"temporal.conv{i}", (c,) + sp[1:] + (t,)))
    out.append(("temporal.out", feat))
    side = sp[1]
    for i, c in enumerate(cfg.decoder_channels):
        side *= 2
        out.append((f"decoder.stage{i}", (c, side, side)))
    return out
