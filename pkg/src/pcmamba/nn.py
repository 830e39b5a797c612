"""Parameter containers shared by the SSM, block and network layers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_rng(seed: int, name: str) -> np.random.Generator:
    """RNG keyed by (seed, parameter name).

    Initial values depend only on the name, so two networks built from the
    same seed share every parameter they have in common regardless of which
    optional branches were constructed.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=T.get_default_dtype(), name=name)


class Module:
    """Attribute-walking parameter registry, in the torch style."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, *, seed: int, name: str, bias: bool = True,
                 init: str = "uniform"):
        rng = init_rng(seed, name + ".weight")
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = param(w, name + ".weight")
        self.bias = param(np.zeros(d_out), name + ".bias") if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, *, name: str, eps: float = 1e-5):
        self.weight = param(np.ones(dim), name + ".weight")
        self.bias = param(np.zeros(dim), name + ".bias")
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, d_in: int, hidden: int, d_out: int, *, seed: int, name: str):
        self.fc1 = Linear(d_in, hidden, seed=seed, name=name + ".fc1")
        self.fc2 = Linear(hidden, d_out, seed=seed, name=name + ".fc2")

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
