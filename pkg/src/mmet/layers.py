"""Small layer toolkit on top of :mod:`mmet.backend`."""

from __future__ import annotations

import math

import numpy as np

from . import backend as B
from .backend import Parameter, Tensor


class Module:
    """Parameter container; children are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.name = name
        return params

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise B.ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(B.default_dtype())


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(uniform(rng, (d_in, d_out), bound))
        self.bias = Parameter(uniform(rng, (d_out,), bound)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = B.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Wavelet(Module):
    """Learnable ``w1 * sin(x) + w2 * cos(x)``."""

    is_wavelet = True

    def __init__(self, w1: float = 1.0, w2: float = 1.0):
        self.w1 = Parameter(w1)
        self.w2 = Parameter(w2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w1 * B.sin(x) + self.w2 * B.cos(x)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return B.layernorm(x, self.eps) * self.gain + self.shift


class FeedForward(Module):
    """Linear -> wavelet -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.act = Wavelet()
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))

    def activations(self):
        return [self.act]
