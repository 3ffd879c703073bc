"""Parameter containers and the small layer set the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import Parameter, Tensor


class Module:
    """Holds Parameters and sub-Modules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_precision(self) -> None:
        """Cast every parameter to the current global dtype."""
        dtype = T.get_dtype()
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def xavier_uniform(rng: SeededRng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: SeededRng, d_in: int, d_out: int, bias: bool = True, init: str = "xavier"):
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            w = xavier_uniform(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Linear layers with ReLU between them."""

    def __init__(self, rng: SeededRng, dims: list, last_init: str = "xavier"):
        n = len(dims) - 1
        self.layers = [Linear(rng, dims[i], dims[i + 1], init=last_init if i == n - 1 else "xavier")
                       for i in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class FeedForward(Module):
    """Pre-norm residual MLP block with hidden ratio ``ratio``."""

    def __init__(self, rng: SeededRng, dim: int, ratio: int = 4, zero_out: bool = False):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim, init="zeros" if zero_out else "xavier")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(T.relu(self.fc1(self.norm(x))))
