from __future__ import annotations

from typing import Iterator

import numpy as np

from ..autodiff import Tensor, get_dtype


class Parameter(Tensor):
    """A trainable leaf tensor owned by a Module."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container with attribute-order traversal.

    Parameters are ``Parameter`` attributes, buffers are ``np.ndarray``
    attributes, and submodules may sit in attributes or in lists/tuples.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                raise KeyError(f"unexpected state entry {name!r}")
            if target.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {name!r}: model {target.shape}, "
                                 f"state {tuple(arr.shape)}")
            target[...] = arr


def param(arr, name=None) -> Parameter:
    return Parameter(np.asarray(arr, dtype=get_dtype()), name=name)
