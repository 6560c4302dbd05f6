"""Differentiable layers built on :mod:`motion2spec.numerics.tensor`.

Convolutions run as chunked im2col + matmul. Inputs are channels-first,
``[C, D, H, W]`` or ``[B, C, D, H, W]``.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    is_grad_enabled,
    make_result,
    matmul,
    reshape,
    take,
    transpose,
)

def _tuple(value, n: int) -> tuple:
    if isinstance(value, (tuple, list)):
        if len(value) != n:
            raise ConfigError(f"expected {n} values, got {value}")
        return tuple(int(v) for v in value)
    return (int(value),) * n


def _batched(x: Tensor, spatial: int):
    """Return ``(x_with_batch_axis, was_unbatched)``."""
    if x.ndim == spatial + 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != spatial + 2:
        raise DimensionError(f"expected {spatial + 1}-D or {spatial + 2}-D input, got shape {x.shape}")
    return x, False


# -- dense layers ------------------------------------------------------------
def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``[d_in, d_out]``; ``x`` may have leading dims."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return out if x.ndim == 2 else reshape(out, lead + (weight.shape[1],))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm gain/bias must be ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        g_bias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return make_result(out, (x, gain, bias), bw, "layer_norm")


# -- convolution ---------------------------------------------------------------
# Patch matrices are built in (offset, channel)-major layout from a
# channel-first-major copy of the input, a few samples (or depth slabs) at a
# time so that each one stays cache-sized; backward rebuilds them per chunk.
_CHUNK_BYTES = 16 * 2**20


def _offsets(kernel):
    return list(itertools.product(*(range(k) for k in kernel)))


def _chunks(B: int, out_sp: tuple, row_bytes: int):
    """Yield ``(b0, b1, d0, d1)`` blocks of output positions."""
    per_sample = int(np.prod(out_sp)) * row_bytes
    if per_sample <= _CHUNK_BYTES:
        step = max(1, _CHUNK_BYTES // max(per_sample, 1))
        for b0 in range(0, B, step):
            yield b0, min(B, b0 + step), 0, out_sp[0]
        return
    plane = int(np.prod(out_sp[1:])) * row_bytes
    step = max(1, _CHUNK_BYTES // max(plane, 1))
    for b in range(B):
        for d0 in range(0, out_sp[0], step):
            yield b, b + 1, d0, min(out_sp[0], d0 + step)


def _windows(offset, stride, out_sp, d0, d1):
    sub = (d1 - d0,) + tuple(out_sp[1:])
    starts = (offset[0] + d0 * stride[0],) + tuple(offset[1:])
    return tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(starts, stride, sub)), sub


def _gather(xpt, block, kernel, stride, out_sp) -> np.ndarray:
    """Patch matrix ``[n_offsets * C, positions]`` for one block of outputs."""
    b0, b1, d0, d1 = block
    C = xpt.shape[0]
    offsets = _offsets(kernel)
    sub = (d1 - d0,) + tuple(out_sp[1:])
    cols = np.empty((len(offsets), C, b1 - b0) + sub, dtype=xpt.dtype)
    for n, offset in enumerate(offsets):
        window, _ = _windows(offset, stride, out_sp, d0, d1)
        cols[n] = xpt[(slice(None), slice(b0, b1)) + window]
    return cols.reshape(len(offsets) * C, -1)


def _scatter(gxpt, gcols, block, kernel, stride, out_sp) -> None:
    b0, b1, d0, d1 = block
    C = gxpt.shape[0]
    offsets = _offsets(kernel)
    sub = (d1 - d0,) + tuple(out_sp[1:])
    gcols = gcols.reshape((len(offsets), C, b1 - b0) + sub)
    for n, offset in enumerate(offsets):
        window, _ = _windows(offset, stride, out_sp, d0, d1)
        gxpt[(slice(None), slice(b0, b1)) + window] += gcols[n]


def conv(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation; ``weight`` is ``[C_out, C_in, k...]`` and fixes N."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    nd = weight.ndim - 2
    x, unbatched = _batched(x, nd)
    B, C = x.shape[:2]
    c_out, c_in = weight.shape[:2]
    kernel = tuple(weight.shape[2:])
    if C != c_in:
        raise DimensionError(f"conv: input has {C} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv: bias shape {bias.shape} != ({c_out},)")
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    if min(stride) < 1:
        raise ConfigError("conv stride must be >= 1")
    sp = x.shape[2:]
    if any(s + 2 * p < k for s, p, k in zip(sp, padding, kernel)):
        raise DimensionError(f"conv: kernel {kernel} larger than padded input {sp} (+{padding})")
    out_sp = tuple((s + 2 * p - k) // st + 1 for s, p, k, st in zip(sp, padding, kernel, stride))

    # channel-first-major copy: [C, B, *padded spatial]
    swap = (1, 0) + tuple(range(2, 2 + nd))
    xpt = np.pad(x.data.transpose(swap), ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    w2 = weight.data.transpose((0,) + tuple(range(2, 2 + nd)) + (1,)).reshape(c_out, -1)
    row_bytes = w2.shape[1] * xpt.itemsize
    blocks = list(_chunks(B, out_sp, row_bytes))

    out_t = np.empty((c_out, B) + out_sp, dtype=np.result_type(xpt, w2))
    for block in blocks:
        b0, b1, d0, d1 = block
        cols = _gather(xpt, block, kernel, stride, out_sp)
        out_t[:, b0:b1, d0:d1] = (w2 @ cols).reshape((c_out, b1 - b0, d1 - d0) + out_sp[1:])
    out = np.ascontiguousarray(out_t.transpose(swap))
    if bias is not None:
        out += bias.data.reshape((c_out,) + (1,) * nd)

    def bw(g):
        g_t = g.transpose(swap)
        gw = np.zeros_like(w2) if weight.requires_grad else None
        gxpt = np.zeros_like(xpt) if x.requires_grad else None
        for block in blocks:
            b0, b1, d0, d1 = block
            g_blk = g_t[:, b0:b1, d0:d1].reshape(c_out, -1)
            if gw is not None:
                gw += g_blk @ _gather(xpt, block, kernel, stride, out_sp).T
            if gxpt is not None:
                _scatter(gxpt, w2.T @ g_blk, block, kernel, stride, out_sp)
        gx = gb = None
        if gw is not None:
            gw = gw.reshape((c_out,) + kernel + (c_in,)).transpose((0, nd + 1) + tuple(range(1, nd + 1)))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        if gxpt is not None:
            crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, sp))
            gx = np.ascontiguousarray(gxpt[crop].transpose(swap))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    result = make_result(out, parents, bw, f"conv{nd}d")
    return reshape(result, result.shape[1:]) if unbatched else result


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    if as_tensor(weight).ndim != 5:
        raise DimensionError("conv3d weight must be [C_out, C_in, k, k, k]")
    return conv(x, weight, bias, stride, padding)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    if as_tensor(weight).ndim != 4:
        raise DimensionError("conv2d weight must be [C_out, C_in, k, k]")
    return conv(x, weight, bias, stride, padding)


def conv2d_transpose(x, weight, bias=None, stride: int = 2, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Fractionally strided 2-D convolution; ``weight`` is ``[C_in, C_out, k, k]``.

    Output side is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError("conv2d_transpose weight must be [C_in, C_out, k, k]")
    x, unbatched = _batched(x, 2)
    B, C, H, W = x.shape
    c_in, c_out, k, _ = weight.shape
    if C != c_in:
        raise DimensionError(f"conv2d_transpose: input has {C} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} != ({c_out},)")
    s, p, op = int(stride), int(padding), int(output_padding)
    if s < 1 or p < 0 or not 0 <= op < s:
        raise ConfigError("conv2d_transpose: invalid stride/padding/output_padding")
    h_out = (H - 1) * s - 2 * p + k + op
    w_out = (W - 1) * s - 2 * p + k + op
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d_transpose: non-positive output size")

    xcl = np.ascontiguousarray(np.moveaxis(x.data, 1, -1)).reshape(-1, c_in)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(c_in, k * k * c_out)
    contrib = (xcl @ w2).reshape(B, H, W, k, k, c_out)
    full_h, full_w = (H - 1) * s + k + op, (W - 1) * s + k + op
    full = np.zeros((B, full_h, full_w, c_out), dtype=contrib.dtype)
    for i in range(k):
        for j in range(k):
            full[:, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s] += contrib[:, :, :, i, j]
    out_cl = full[:, p : p + h_out, p : p + w_out]
    if bias is not None:
        out_cl = out_cl + bias.data
    out = np.ascontiguousarray(np.moveaxis(out_cl, -1, 1))

    def bw(g):
        gfull = np.zeros_like(full)
        gfull[:, p : p + h_out, p : p + w_out] = np.moveaxis(g, 1, -1)
        gcontrib = np.empty((B, H, W, k, k, c_out), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gcontrib[:, :, :, i, j] = gfull[:, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s]
        gc2 = gcontrib.reshape(-1, k * k * c_out)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(np.moveaxis((gc2 @ w2.T).reshape(B, H, W, c_in), -1, 1))
        if weight.requires_grad:
            gw = (xcl.T @ gc2).reshape(c_in, k, k, c_out).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    result = make_result(out, parents, bw, "conv2d_transpose")
    return reshape(result, result.shape[1:]) if unbatched else result


# -- pooling -------------------------------------------------------------------
def maxpool(x, window: int = 2, spatial: int = 3) -> Tensor:
    """Non-overlapping max pooling over the trailing ``spatial`` axes.

    Gradient goes to the first maximal element of each window (scan order).
    """
    x = as_tensor(x)
    w = int(window)
    if w < 1:
        raise ConfigError("pool window must be >= 1")
    lead, sp = x.shape[:-spatial], x.shape[-spatial:]
    if any(s % w for s in sp):
        raise DimensionError(f"maxpool: spatial dims {sp} not divisible by {w}")
    nd = x.ndim

    def along(axis, o):
        return (slice(None),) * axis + (slice(o, None, w),)

    # separable: reduce the last spatial axis first, ties to the lower index;
    # the composite choice is the first maximum in scan order
    stages, cur = [], x.data
    for axis in range(nd - 1, nd - spatial - 1, -1):
        out = cur[along(axis, 0)].copy()
        arg = np.zeros(out.shape, dtype=np.uint8)
        better = np.empty(out.shape, dtype=bool)
        for o in range(1, w):
            cand = cur[along(axis, o)]
            np.greater(cand, out, out=better)
            np.maximum(out, cand, out=out)
            arg = better.view(np.uint8).copy() if o == 1 else np.where(better, np.uint8(o), arg)
        stages.append((axis, cur.shape, arg))
        cur = out

    def bw(g):
        for axis, shape, arg in reversed(stages):
            gin = np.empty(shape, dtype=g.dtype)
            for o in range(w):
                np.multiply(g, arg == o, out=gin[along(axis, o)])
            g = gin
        return (g,)

    return make_result(cur, (x,), bw, "maxpool")


def maxpool3d(x, window: int = 2) -> Tensor:
    return maxpool(x, window, spatial=3)


# -- attention -------------------------------------------------------------------
def band_mask(length: int, window: int) -> np.ndarray:
    """Boolean ``[T, T]`` mask: token i sees j iff ``|i - j| <= (window - 1) / 2``."""
    r = (window - 1) // 2
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= r


def dense_attention(q, k, v, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over all pairs, built from generic ops.

    ``allowed`` is an optional boolean ``[T, T]`` mask. Quadratic in ``T``; used
    as the reference implementation and the dense baseline in benchmarks.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * (1.0 / math.sqrt(d))
    if allowed is not None:
        scores = scores + np.where(allowed, 0.0, -1e9).astype(q.dtype)
    return matmul(softmax(scores, axis=-1), v)


def sliding_window_attention(q, k, v, window: int, positions: Optional[Sequence[int]] = None) -> Tensor:
    """Scaled dot-product attention restricted to a sliding window.

    Token ``t`` attends to tokens whose index lies in ``[t - r, t + r]`` with
    ``r = (window - 1) // 2``. Cost is ``O(T * window * d)``.

    Args:
        q, k, v: ``[..., T, d]`` tensors.
        window: odd total window width (3 means one neighbour on each side).
        positions: optional time index of each stored row. The band is built
            from these indices, not from storage order, so rows may arrive
            shuffled. Indices must form a consecutive run.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"attention window must be odd and >= 1, got {window}")
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    T = q.shape[-2]
    if positions is None:
        return _banded_attention(q, k, v, min((window - 1) // 2, T - 1))
    positions = np.asarray(positions).reshape(-1)
    if positions.shape[0] != T:
        raise DimensionError(f"{positions.shape[0]} positions for {T} tokens")
    order = np.argsort(positions, kind="stable")
    if np.any(np.diff(positions[order]) != 1):
        raise ContractError("positions must be distinct consecutive integers")
    if np.array_equal(order, np.arange(T)):
        return _banded_attention(q, k, v, min((window - 1) // 2, T - 1))
    axis = q.ndim - 2
    q, k, v = (take(t, order, axis) for t in (q, k, v))
    out = _banded_attention(q, k, v, min((window - 1) // 2, T - 1))
    return take(out, np.argsort(order), axis)


def _banded_attention(q: Tensor, k: Tensor, v: Tensor, r: int) -> Tensor:
    T, d = q.shape[-2:]
    w = 2 * r + 1
    scale = 1.0 / math.sqrt(d)
    pad = ((0, 0),) * (q.ndim - 2) + ((r, r), (0, 0))
    kp, vp = np.pad(k.data, pad), np.pad(v.data, pad)
    kb = np.stack([kp[..., o : o + T, :] for o in range(w)], axis=-2)  # [..., T, w, d]
    vb = np.stack([vp[..., o : o + T, :] for o in range(w)], axis=-2)
    t_idx = np.arange(T)[:, None] + np.arange(w)[None, :] - r
    valid = (t_idx >= 0) & (t_idx < T)

    scores = np.einsum("...td,...twd->...tw", q.data, kb) * scale
    scores = np.where(valid, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("...tw,...twd->...td", probs, vb)

    def bw(g):
        gq = gk = gv = None
        g_probs = np.einsum("...td,...twd->...tw", g, vb)
        g_scores = probs * (g_probs - (g_probs * probs).sum(axis=-1, keepdims=True))
        if q.requires_grad:
            gq = np.einsum("...tw,...twd->...td", g_scores, kb) * scale
        if k.requires_grad:
            gkb = g_scores[..., None] * q.data[..., None, :] * scale
            gk = _unband(gkb, kp.shape, r)
        if v.requires_grad:
            gvb = probs[..., None] * g[..., None, :]
            gv = _unband(gvb, vp.shape, r)
        return gq, gk, gv

    return make_result(out.astype(q.dtype, copy=False), (q, k, v), bw, "sliding_window_attention")


def _unband(gb: np.ndarray, padded_shape: tuple, r: int) -> np.ndarray:
    T = gb.shape[-3]
    gp = np.zeros(padded_shape, dtype=gb.dtype)
    for o in range(gb.shape[-2]):
        gp[..., o : o + T, :] += gb[..., o, :]
    return gp[..., r : r + T, :]
