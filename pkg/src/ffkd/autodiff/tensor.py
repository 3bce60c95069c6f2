"""Tensor and tape for reverse-mode differentiation.

Operations append ``(output, inputs, backward_fn)`` records to the innermost
active :class:`Tape`.  Because records are appended in execution order the tape
is already topologically sorted, so the backward pass is a single reverse walk.
Without an active tape nothing is recorded (inference mode).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_TAPES: list["Tape"] = []


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are cast to."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy: used for freshly computed op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t.is_leaf = True
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_DTYPE))


def check_finite(arr: np.ndarray, op: str, what: str = "output") -> None:
    # a finite sum implies finite elements; fall back to the full test otherwise
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: non-finite {what}")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out`` and push a tape record when any input needs a gradient."""
    for t in inputs:
        if t.is_leaf:
            check_finite(t.data, op, "input")
    check_finite(out, op)
    res = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res.is_leaf = False
        tape.ops.append((res, tuple(inputs), backward, op))
    return res


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op run inside the block whose inputs need
    gradients is appended.  ``backward`` consumes the record.
    """

    def __init__(self):
        self.ops: list = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaves listed in ``params`` that the loss does not reach get a zero
        gradient.  The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
        else:
            grads[id(loss)] = np.ones_like(loss.data)
        for out, inputs, fn, op in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"backward rule of {op} returned grad shape {gi.shape} "
                        f"for input of shape {inp.shape}")
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.ops.clear()
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g
