"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tape, Tensor

MAX_PARAMS = 10_000


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tolerance: float
    per_param: dict = field(default_factory=dict)
    kink_retries: int = 0

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ShapeError(f"grad_check: fragment must return a scalar tensor, got {shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tolerance: float = 1e-3,
               h: float = 1e-3, rel_floor: float = 1e-2) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    The error of each entry is ``|a - n| / max(|a|, |n|, s)`` with
    ``s = rel_floor * max|n|`` over the whole check, so entries that are tiny
    relative to the gradient's overall scale are judged on absolute terms.
    Params are perturbed one entry at a time and restored afterwards.  When the
    difference at ``h`` disagrees with one at ``h / 1000`` the wide stencil
    straddles a kink (hard-swish corners, max-pool switches) and the narrow
    value is used; run in float64 (``default_dtype``) so the narrow step is
    above roundoff.
    """
    params = list(params)
    total = sum(p.size for p in params)
    if total > MAX_PARAMS:
        raise ValueError(f"grad_check: {total} parameter entries exceeds limit {MAX_PARAMS}")
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = fn()
        _scalar(out)
        tape.backward(out, params)
    analytic = [p.grad.astype(np.float64) for p in params]

    numeric = []
    kinks = 0
    for p in params:
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            d = _central_diff(fn, flat, i, h)
            fine = _central_diff(fn, flat, i, h * 1e-3)
            # smooth functions agree to O(h^2); a gap means the wide stencil
            # straddles a non-differentiable point
            if abs(d - fine) > 1e-4 * max(abs(d), abs(fine), 1e-8):
                kinks += 1
                d = fine
            num[i] = d
        numeric.append(num.reshape(p.shape))

    scale = max((np.abs(n).max() for n in numeric if n.size), default=0.0)
    floor = max(rel_floor * scale, 1e-7)
    per = {}
    worst = 0.0
    for k, (p, a, n) in enumerate(zip(params, analytic, numeric)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = float((np.abs(a - n) / denom).max()) if a.size else 0.0
        per[p.name or f"param{k}"] = err
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return GradCheckReport(max_rel_err=worst, passed=worst < tolerance,
                           tolerance=tolerance, per_param=per, kink_retries=kinks)


def _central_diff(fn, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    hi = orig + flat.dtype.type(h)
    lo = orig - flat.dtype.type(h)
    flat[i] = hi
    up = _scalar(fn())
    flat[i] = lo
    down = _scalar(fn())
    flat[i] = orig
    return (up - down) / (float(hi) - float(lo))
