"""Named, shaped parameter arrays with gradient accumulators."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class ParamSet:
    """Ordered mapping ``name -> float64 tensor`` with ``requires_grad`` set.

    Each tensor's ``.grad`` is its gradient accumulator.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray | torch.Tensor] | None = None):
        self._p: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> torch.Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(arr, dtype=np.float64)).clone().to(DTYPE)
        if not torch.isfinite(t).all():
            raise ValueError(f"parameter {name!r} has non-finite entries")
        t.requires_grad_(True)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def names(self) -> list[str]:
        return list(self._p)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._p.items()}

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for k, t in self._p.items():
            g = t.grad
            out[k] = np.zeros(tuple(t.shape)) if g is None else g.detach().numpy().copy()
        return out

    def to_numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().numpy().copy()) for k, v in self._p.items())

    def copy(self) -> "ParamSet":
        return ParamSet(self.to_numpy())

    def equal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(torch.equal(self[k].detach(), other[k].detach()) for k in self)
