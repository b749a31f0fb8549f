"""Boundary distillation: masked embedding split, cross-region attention, MSE.

Training-only machinery. An embedding grid is partitioned by a binary mask
into lesion and background parts, lesion tokens attend over background
tokens, and the reassembled grid E* is pulled toward the original grid by a
mean-squared loss. Inference never touches any of this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .layers import Linear
from .rng import Rng
from .tensor import Tensor


@dataclass
class BDCConfig:
    """Attention width and the training-signal policy knobs."""

    attn_width: int = 32
    stop_gradient_on_target: bool = True  # treat the attended grid as teacher
    residual: bool = True  # lesion tokens keep a residual path
    empty_region_policy: str = "identity"  # degenerate masks: E* := E

    def __post_init__(self):
        if self.attn_width < 1:
            raise ConfigError(f"attn_width must be >= 1, got {self.attn_width}")
        if self.empty_region_policy != "identity":
            raise ConfigError(
                f"unknown empty_region_policy {self.empty_region_policy!r}"
            )


def downsample_mask(mask: np.ndarray, target_hw: tuple) -> np.ndarray:
    """Area-average a binary mask to (h, w), thresholding at 0.5, ties to 1.

    Each output cell averages the input box [floor(i*H/h), ceil((i+1)*H/h));
    boxes tile the input exactly when extents divide evenly.
    """
    mask = np.asarray(mask)
    h, w = target_hw
    hh, ww = mask.shape
    if hh < h or ww < w:
        raise ShapeError(f"cannot downsample {mask.shape} to larger {target_hw}")
    _check_binary(mask)
    out = np.empty((h, w))
    rows = [(int(np.floor(i * hh / h)), int(np.ceil((i + 1) * hh / h))) for i in range(h)]
    cols = [(int(np.floor(j * ww / w)), int(np.ceil((j + 1) * ww / w))) for j in range(w)]
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = mask[r0:r1, c0:c1].mean()
    return (out >= 0.5).astype(np.float64)


def _check_binary(mask: np.ndarray) -> None:
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ContractError("mask must be strictly binary")


def masked_split(grid, mask: np.ndarray):
    """Partition a (h, w, c) grid into lesion and background parts.

    The parts sum back to the grid exactly: multiplying by a {0,1} mask and
    its complement is lossless in floating point.
    """
    grid = T.as_tensor(grid)
    mask = np.asarray(mask, dtype=np.float64)
    if grid.ndim != 3 or mask.shape != grid.shape[:2]:
        raise ContractError(
            f"grid {grid.shape} and mask {mask.shape} extents do not match"
        )
    _check_binary(mask)
    m = mask[:, :, None]
    return T.mul(grid, m), T.mul(grid, 1.0 - m)


class BoundaryAttention:
    """Single-head scaled dot-product attention from lesion to background."""

    def __init__(self, rng: Rng, channels: int, cfg: BDCConfig):
        self.channels = channels
        self.cfg = cfg
        dk = cfg.attn_width
        self.q = Linear(rng.child(0), channels, dk, bias=False)
        self.k = Linear(rng.child(1), channels, dk, bias=False)
        self.v = Linear(rng.child(2), channels, dk, bias=False)
        self.out = Linear(rng.child(3), dk, channels)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        scale = self.cfg.attn_width**-0.5
        scores = T.mul(T.matmul(self.q(queries), T.transpose(self.k(context), (1, 0))), scale)
        attn = T.softmax(scores, axis=-1)
        return self.out(T.matmul(attn, self.v(context)))

    def named_params(self, prefix: str):
        yield from self.q.named_params(f"{prefix}.q")
        yield from self.k.named_params(f"{prefix}.k")
        yield from self.v.named_params(f"{prefix}.v")
        yield from self.out.named_params(f"{prefix}.out")


def distill_loss(grid, target, stop_gradient_on_target: bool = True) -> Tensor:
    """Mean squared difference between two grids of equal extents."""
    grid, target = T.as_tensor(grid), T.as_tensor(target)
    if grid.shape != target.shape:
        raise ContractError(f"extents {grid.shape} vs {target.shape} do not match")
    if stop_gradient_on_target:
        target = target.detach()
    diff = T.sub(grid, target)
    return T.reduce(T.mul(diff, diff), "mean")


class BoundaryDistiller:
    """Builds the attended grid E* and the distillation loss against it."""

    def __init__(self, rng: Rng, channels: int, cfg: BDCConfig):
        self.cfg = cfg
        self.attn = BoundaryAttention(rng, channels, cfg)

    def refine(self, grid: Tensor, mask: np.ndarray) -> Tensor:
        """Attend lesion tokens over background tokens; reassemble the grid.

        Degenerate masks (all lesion or all background) leave no boundary to
        sharpen: the grid passes through unchanged.
        """
        h, w, c = grid.shape
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (h, w):
            raise ContractError(f"grid {grid.shape} and mask {mask.shape} mismatch")
        _check_binary(mask)
        flat_mask = mask.astype(bool).reshape(-1)
        n_lesion = int(flat_mask.sum())
        if n_lesion == 0 or n_lesion == flat_mask.size:
            return grid
        idx_lesion = np.flatnonzero(flat_mask)
        idx_background = np.flatnonzero(~flat_mask)
        flat = T.reshape(grid, (h * w, c))
        q_tokens = T.take_rows(flat, idx_lesion)
        ctx_tokens = T.take_rows(flat, idx_background)
        attended = self.attn(q_tokens, ctx_tokens)
        if self.cfg.residual:
            attended = T.add(q_tokens, attended)
        base = T.scatter_add_rows(
            T.as_tensor(np.zeros((h * w, c))), idx_background, ctx_tokens
        )
        assembled = T.scatter_add_rows(base, idx_lesion, attended)
        return T.reshape(assembled, (h, w, c))

    def loss(self, grid: Tensor, mask: np.ndarray) -> Tensor:
        refined = self.refine(grid, mask)
        return distill_loss(grid, refined, self.cfg.stop_gradient_on_target)

    def named_params(self, prefix: str):
        yield from self.attn.named_params(f"{prefix}.attn")


def bdc_active(phase: str) -> bool:
    """Distillation runs in training only; inference must never reach it."""
    if phase not in ("train", "infer"):
        raise ContractError(f"unknown phase {phase!r}")
    return phase == "train"
