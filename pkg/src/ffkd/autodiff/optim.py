from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: Sequence[Tensor], state: OptimizerState,
              grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero.
    """
    if not state.lr > 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state holds {len(state.m)} buffers for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{p.name or i} of shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    step_size = state.lr * math.sqrt(c2) / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # eps scaled so the update equals lr * mhat / (sqrt(vhat) + eps)
        p.data -= (step_size * m / (np.sqrt(v) + state.eps * math.sqrt(c2))).astype(p.data.dtype)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr_max
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * frac))
