"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, sum_, mul

_MAX_RESAMPLES = 5


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    status: str  # "pass" | "fail" | "inconclusive"
    per_input: list = field(default_factory=list)
    resamples: int = 0

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _is_kink(f_plus, f_0, f_minus, eps) -> bool:
    # one-sided slopes of a smooth function agree to O(eps * f'');
    # straddling a ReLU/max kink makes them differ by O(slope jump)
    fwd = (f_plus - f_0) / eps
    bwd = (f_0 - f_minus) / eps
    return abs(fwd - bwd) > 1e-3 * (1.0 + abs(fwd) + abs(bwd))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``loss_fn``.

    ``loss_fn`` must return a scalar tensor and read the current contents of
    ``tensors`` (they are perturbed in place and restored). With
    ``max_coords`` only that many coordinates per tensor are probed. A probe
    that lands within ``eps`` of a kink is replaced by another coordinate;
    if kinks persist the report is ``inconclusive``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic_all = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    f_0 = loss.item()
    worst, per_input, resamples, inconclusive = 0.0, [], 0, False
    for t, analytic in zip(tensors, analytic_all):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is None or max_coords >= n:
            candidates, spare = list(range(n)), []
        else:
            perm = rng.permutation(n)
            candidates, spare = list(perm[:max_coords]), list(perm[max_coords:])
        picked, a_vals, n_vals = [], [], []
        kinks_here = 0
        while candidates:
            i = candidates.pop(0)
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            if _is_kink(f_plus, f_0, f_minus, eps):
                kinks_here += 1
                resamples += 1
                if kinks_here > _MAX_RESAMPLES:
                    inconclusive = True
                    break
                if spare:
                    candidates.append(spare.pop(0))
                continue
            picked.append(i)
            a_vals.append(analytic.reshape(-1)[i])
            n_vals.append((f_plus - f_minus) / (2 * eps))
        err = _rel_error(np.asarray(a_vals), np.asarray(n_vals)) if picked else 0.0
        per_input.append(err)
        worst = max(worst, err)

    if inconclusive:
        status = "inconclusive"
    else:
        status = "pass" if worst < tol else "fail"
    return GradCheckReport(max_rel_error=worst, tol=tol, status=status, per_input=per_input, resamples=resamples)


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[tuple],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    max_coords: Optional[int] = None,
    sampler: Optional[Callable[[np.random.Generator, tuple], np.ndarray]] = None,
) -> GradCheckReport:
    """Gradient-check ``op`` on random float64 inputs of ``input_shapes``.

    The op output is reduced to a scalar through a fixed random projection so
    every output element contributes. Inputs that keep landing on kinks are
    redrawn up to five times before the check is declared inconclusive.
    """
    rng = np.random.default_rng(seed)
    sampler = sampler or (lambda g, shape: g.standard_normal(shape))
    report = None
    for attempt in range(_MAX_RESAMPLES + 1):
        inputs = [Tensor(sampler(rng, tuple(s)).astype(np.float64), requires_grad=True) for s in input_shapes]
        probe_out = op(*inputs)
        projection = rng.standard_normal(probe_out.shape)

        def loss_fn():
            return sum_(mul(op(*inputs), projection))

        report = check_gradients(loss_fn, inputs, eps=eps, tol=tol, max_coords=max_coords, rng=rng)
        report.resamples += attempt
        if report.status != "inconclusive":
            return report
    return report


def directional_check(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``grad . v`` with a central difference along a random unit direction ``v``.

    Suited to models with too many parameters to probe one by one: two extra
    forward passes cover every tensor at once. A direction whose one-sided
    slopes disagree (a kink in between) is redrawn, up to five times.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    f_0 = loss.item()
    originals = [t.data.copy() for t in tensors]

    def at(direction, scale):
        for t, orig, d in zip(tensors, originals, direction):
            t.data[...] = orig + scale * d
        try:
            return loss_fn().item()
        finally:
            for t, orig in zip(tensors, originals):
                t.data[...] = orig

    for attempt in range(_MAX_RESAMPLES + 1):
        direction = [rng.standard_normal(t.shape) for t in tensors]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
        direction = [d / norm for d in direction]
        f_plus, f_minus = at(direction, eps), at(direction, -eps)
        if _is_kink(f_plus, f_0, f_minus, eps):
            continue
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))
        numeric = (f_plus - f_minus) / (2 * eps)
        err = _rel_error(np.array([analytic]), np.array([numeric]))
        return GradCheckReport(err, tol, "pass" if err < tol else "fail", [err], attempt)
    return GradCheckReport(float("nan"), tol, "inconclusive", [], _MAX_RESAMPLES + 1)
