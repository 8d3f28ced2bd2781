"""Parameter containers and seeded He-style initializers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


@dataclass
class Conv:
    """2-D convolution weights (out_c, in_c, kh, kw) with bias."""

    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, out_c, in_c, kh, kw, dtype, zero_init=False):
        if zero_init:
            w = zeros((out_c, in_c, kh, kw), dtype)
        else:
            w = he_normal(rng, (out_c, in_c, kh, kw), in_c * kh * kw, dtype)
        return cls(w=w, b=zeros((out_c,), dtype))

    def apply(self, x, stride=1, padding=0):
        return ad.conv2d(x, self.w, self.b, stride=stride, padding=padding)

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class Dense:
    """Affine layer with weight (out, in) and bias (out,)."""

    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, out_f, in_f, dtype, zero_init=False, scale=1.0):
        if zero_init:
            w = zeros((out_f, in_f), dtype)
        else:
            w = he_normal(rng, (out_f, in_f), in_f, dtype)
            if scale != 1.0:
                w.data *= scale
        return cls(w=w, b=zeros((out_f,), dtype))

    def apply(self, x):
        return ad.linear(x, self.w, self.b)

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def collect_named(*groups):
    """Merge (name, tensor) iterables into an ordered dict, rejecting dupes."""
    table = {}
    for group in groups:
        for name, tensor in group:
            if name in table:
                raise ValueError(f"duplicate parameter name {name!r}")
            table[name] = tensor
    return table
