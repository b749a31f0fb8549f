"""Small parameterized layers shared by the model modules."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .optim import Parameter
from .rng import Rng
from .tensor import Tensor


class Linear:
    """Affine map over the last axis; leading axes are flattened through."""

    def __init__(self, rng: Rng, d_in: int, d_out: int, bias: bool = True,
                 zero_init: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out), std=d_in**-0.5)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last axis {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        flat = T.reshape(x, (n, self.d_in))
        y = T.matmul(flat, self.w.tensor)
        if self.b is not None:
            y = T.add(y, self.b.tensor)
        return T.reshape(y, lead + (self.d_out,))

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.reduce(x, "mean", axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.reduce(T.mul(centered, centered), "mean", axis=-1, keepdims=True)
        inv = T.power(T.add(var, self.eps), -0.5)
        return T.add(T.mul(T.mul(centered, inv), self.gain.tensor), self.bias.tensor)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class RMSNorm:
    """Scale the last axis by its root-mean-square; cheaper than LayerNorm."""

    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = T.reduce(T.mul(x, x), "mean", axis=-1, keepdims=True)
        inv = T.power(T.add(ms, self.eps), -0.5)
        return T.mul(T.mul(x, inv), self.gain.tensor)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """(H, W, C) -> (H/f, W/f, f*f*C) by folding each f x f tile into channels."""
    h, w, c = x.shape
    f = int(factor)
    if f < 1 or h % f or w % f:
        raise ShapeError(f"space_to_depth factor {f} does not divide {x.shape}")
    y = T.reshape(x, (h // f, f, w // f, f, c))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (h // f, w // f, f * f * c))


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """Inverse of space_to_depth: (h, w, f*f*C) -> (h*f, w*f, C)."""
    h, w, c = x.shape
    f = int(factor)
    if f < 1 or c % (f * f):
        raise ShapeError(f"depth_to_space factor {f} does not divide channels {c}")
    cout = c // (f * f)
    y = T.reshape(x, (h, w, f, f, cout))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (h * f, w * f, cout))
