"""Trainable parameters and the Adam update rule."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Parameter:
    """A leaf tensor plus Adam moment buffers and a step counter."""

    __slots__ = ("tensor", "m", "v", "step")

    def __init__(self, data):
        self.tensor = Tensor(np.array(data, dtype=np.float64))
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    def assign(self, values) -> None:
        """Overwrite the value and reset optimizer state (used by loading)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ContractError(
                f"assign shape {values.shape} does not match parameter {self.shape}"
            )
        self.tensor = Tensor(values)
        self.m = np.zeros_like(values)
        self.v = np.zeros_like(values)
        self.step = 0

    def __repr__(self):
        return f"Parameter(shape={self.shape}, step={self.step})"


def adam_step(params, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update for each parameter.

    `grads` is a GradientMap (or any mapping indexable by Parameter); the step
    counter increments before bias correction.
    """
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} vs parameter {p.shape}")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.tensor = Tensor(p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps))
