"""Parameter containers and initialisers shared by every layer."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, dropout, layer_norm, matmul, relu


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return normal(rng, (fan_in, fan_out), np.sqrt(2.0 / fan_in))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape) -> Tensor:
    return param(np.ones(shape))


class Module:
    """Walks its attributes (tensors, modules, lists of either) to find parameters.

    Ordering follows attribute insertion order, so names are deterministic.
    Shared tensors are reported once, under the first name they are reached by.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        for name, value in vars(self).items():
            yield from _walk_value(f"{prefix}{name}", value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointError

        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()


def _walk_value(name: str, value, seen: set[int]):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item, seen)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{name}.{key}", item, seen)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = glorot(rng, fan_in, fan_out)
        self.bias = zeros(fan_out) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones(d)
        self.bias = zeros(d)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Single fully connected layer with ReLU and dropout."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, rate: float = 0.0):
        self.linear = Linear(rng, fan_in, fan_out)
        self.rate = rate

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        return dropout(relu(self.linear(x)), self.rate, rng)
