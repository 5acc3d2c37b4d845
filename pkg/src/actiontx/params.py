"""Named parameter sets with per-name deterministic initialisation."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, key_to_int, parameter


class ModelParams:
    """Ordered mapping of parameter name -> Tensor.

    Each parameter's initial value depends only on (seed, name), so two models
    that share a sub-network (say, the trunk) start from identical weights
    regardless of which heads they carry.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._p: OrderedDict[str, Tensor] = OrderedDict()

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, key_to_int(name)])

    def add_uniform(self, name: str, shape: tuple, fan_in: int, gain: float = 1.0) -> Tensor:
        bound = gain * np.sqrt(3.0 / fan_in)
        data = self._rng(name).uniform(-bound, bound, size=shape)
        return self._store(name, data)

    def add_const(self, name: str, shape: tuple, value: float = 0.0) -> Tensor:
        return self._store(name, np.full(shape, value))

    def add_linear(self, prefix: str, n_in: int, n_out: int, gain: float = 1.0) -> None:
        self.add_uniform(f"{prefix}.w", (n_in, n_out), n_in, gain)
        self.add_const(f"{prefix}.b", (n_out,))

    def add_conv3d(self, prefix: str, kernel: tuple, c_in: int, c_out: int, gain: float = 2 ** 0.5) -> None:
        fan_in = int(np.prod(kernel)) * c_in
        self.add_uniform(f"{prefix}.w", tuple(kernel) + (c_in, c_out), fan_in, gain)
        self.add_const(f"{prefix}.b", (c_out,))

    def add_layernorm(self, prefix: str, dim: int) -> None:
        self.add_const(f"{prefix}.gain", (dim,), 1.0)
        self.add_const(f"{prefix}.bias", (dim,), 0.0)

    def _store(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(np.asarray(data, dtype=self.dtype), name=name)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def values(self):
        return self._p.values()

    def names(self) -> list[str]:
        return list(self._p)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._p.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self._p.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._p.values())

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams(self.seed, dtype)
        for k, v in self._p.items():
            out._store(k, v.data)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._p.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._p) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self._p.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)
