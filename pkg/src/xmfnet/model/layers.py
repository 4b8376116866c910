"""Parameter containers and basic layers."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import SchemaError


class Module:
    """Holds parameter tensors and sub-modules as attributes.

    Parameter names are dotted attribute paths in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise SchemaError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise SchemaError(f"checkpoint shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.W = Tensor(gain * kaiming_uniform(rng, d_in, (d_in, d_out)), requires_grad=True)
        bound = 1.0 / np.sqrt(d_in)
        self.b = Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.W, self.b)


class MLP(Module):
    """Linear layers with leaky-ReLU between them (none after the last)."""

    def __init__(self, dims, rng: np.random.Generator, slope: float = 0.2, final_gain: float = 1.0):
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng, gain=final_gain if i == n - 1 else 1.0)
                       for i in range(n)]
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.leaky_relu(x, self.slope)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 2,
                 padding: int = 1):
        fan_in = c_in * kernel * kernel
        self.W = Tensor(kaiming_uniform(rng, fan_in, (c_out, c_in, kernel, kernel)), requires_grad=True)
        self.b = Tensor(rng.uniform(-1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in), c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.W, self.b, self.stride, self.padding)
