"""Named, ordered parameter collections for the networks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered map of unique names to parameter tensors.

    Iteration order is insertion order, which keeps checkpoints, optimizer
    sweeps, and gradient accumulation deterministic. ``copy`` is deep so a
    base parameter set and an adapted one can coexist.
    """

    def __init__(self) -> None:
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name: {name!r}")
        self._items[name] = tensor
        return tensor

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        # Replacement keeps the original insertion position.
        if name not in self._items:
            raise KeyError(f"unknown parameter: {name!r}; use add() for new names")
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._items.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        return out

    def detached(self) -> "ParamSet":
        """Zero-copy view with gradients off; use for inference passes."""
        out = ParamSet()
        for name, t in self._items.items():
            view = Tensor.__new__(Tensor)
            view.data = t.data
            view.grad = None
            view.requires_grad = False
            view._parents = ()
            view._backprop = None
            out.add(name, view)
        return out

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.size for t in self._items.values())

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self[n].data, other[n].data, rtol=0.0, atol=atol) for n in self
        )
