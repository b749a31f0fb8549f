"""Training losses and the six evaluation measures for binary segmentation.

Losses (overlap dice + pixelwise cross-entropy) operate on autodiff tensors.
The evaluation measures are plain-array functions: threshold overlap scores
(dice / IoU), mean absolute error, the structure measure (object + region
similarity), the enhanced-alignment measure maximized over 256 thresholds,
and the dependency-weighted F-measure. Each has a brute-force reference twin
in the test suite; the implementations here are vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

EPS = float(np.finfo(np.float64).eps)


# -- differentiable losses ----------------------------------------------------


def _loss_pair(pred, target):
    p, m = T.as_tensor(pred), T.as_tensor(target)
    if p.shape != m.shape:
        raise ShapeError(f"prediction {p.shape} vs target {m.shape}")
    return p, m


def dice_loss(pred, target, eps: float = 1e-8) -> Tensor:
    """1 - 2|P*M| / (|P| + |M| + eps), soft overlap on probabilities."""
    p, m = _loss_pair(pred, target)
    inter = T.reduce(T.mul(p, m), "sum")
    denom = T.add(T.add(T.reduce(p, "sum"), T.reduce(m, "sum")), eps)
    return T.sub(1.0, T.div(T.mul(2.0, inter), denom))


def bce_loss(pred, target, clip: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [clip, 1-clip]."""
    p, m = _loss_pair(pred, target)
    p = T.clamp(p, clip, 1.0 - clip)
    ll = T.add(T.mul(m, T.log(p)), T.mul(T.sub(1.0, m), T.log(T.sub(1.0, p))))
    return T.neg(T.reduce(ll, "mean"))


def combined_loss(pred, target) -> Tensor:
    """Sum of the overlap and cross-entropy terms."""
    return T.add(dice_loss(pred, target), bce_loss(pred, target))


# -- thresholded overlap and error --------------------------------------------


def _eval_pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2:
        raise ShapeError(f"prediction {p.shape} vs mask {g.shape}")
    return p, g > 0.5


def mdice_miou(pred, gt, threshold: float = 0.5):
    """Dice and IoU of the thresholded prediction; empty-vs-empty scores 1."""
    p, g = _eval_pair(pred, gt)
    pb = p >= threshold
    inter = int((pb & g).sum())
    ps, gs = int(pb.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        return 1.0, 1.0
    union = ps + gs - inter
    return 2.0 * inter / (ps + gs), inter / union


def mae(pred, gt) -> float:
    """Mean absolute error of the un-thresholded prediction."""
    p, g = _eval_pair(pred, gt)
    return float(np.abs(p - g).mean())


# -- structure measure --------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sx = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sx + EPS)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _region_centroid(g: np.ndarray):
    """1-based centroid of the mask, rounding halves away from zero."""
    rows, cols = g.shape
    total = g.sum()
    if total == 0:
        return _round_half_up(cols / 2.0), _round_half_up(rows / 2.0)
    ci = np.arange(1, cols + 1)
    ri = np.arange(1, rows + 1)
    x = _round_half_up(float((g.sum(axis=0) * ci).sum() / total))
    y = _round_half_up(float((g.sum(axis=1) * ri).sum() / total))
    return x, y


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0.0:
        return float(a / (b + EPS))
    return 1.0 if b == 0.0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Object- plus region-level structural similarity, weighted by alpha."""
    p, gb = _eval_pair(pred, gt)
    g = gb.astype(np.float64)
    u = g.mean()
    if u == 0.0:
        return float(1.0 - p.mean())
    if u == 1.0:
        return float(p.mean())

    fg_score = _object_score(p[gb])
    bg_score = _object_score((1.0 - p)[~gb])
    s_object = u * fg_score + (1.0 - u) * bg_score

    cx, cy = _region_centroid(g)
    rows, cols = g.shape
    area = rows * cols
    quads = []
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, cols)),
                   (slice(cy, rows), slice(0, cx)), (slice(cy, rows), slice(cx, cols))):
        pq, gq = p[rs, cs], g[rs, cs]
        quads.append((pq.size / area, pq, gq))
    s_region = sum(w * _region_ssim(pq, gq) for w, pq, gq in quads if pq.size)

    return float(max(alpha * s_object + (1.0 - alpha) * s_region, 0.0))


# -- enhanced-alignment measure -----------------------------------------------


def _alignment_score(fm: np.ndarray, g: np.ndarray) -> float:
    if not g.any():
        enhanced = 1.0 - fm
    elif g.all():
        enhanced = fm.astype(np.float64)
    else:
        dfm = fm - fm.mean()
        dg = g - g.mean()
        align = 2.0 * dg * dfm / (dg * dg + dfm * dfm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum() / g.size)


def e_measure_max(pred, gt) -> float:
    """Best alignment score over the 256 binarization thresholds k/256."""
    p, g = _eval_pair(pred, gt)
    gd = g.astype(np.float64)
    best = 0.0
    for k in range(256):
        fm = (p >= k / 256.0).astype(np.float64)
        best = max(best, _alignment_score(fm, gd))
    return best


# -- dependency-weighted F-measure --------------------------------------------


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.arange(size) - half
    k = np.exp(-(g[:, None] ** 2 + g[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(g: np.ndarray):
    """Per background pixel: exact distance and index of the nearest
    foreground pixel, ties broken toward the earliest row-major candidate."""
    fg = np.argwhere(g)
    bg = np.argwhere(~g)
    dist = np.empty(len(bg))
    idx = np.empty(len(bg), dtype=np.int64)
    fr, fc = fg[:, 0][None, :], fg[:, 1][None, :]
    for s in range(0, len(bg), 512):
        block = bg[s : s + 512]
        d2 = (block[:, 0][:, None] - fr) ** 2 + (block[:, 1][:, None] - fc) ** 2
        k = np.argmin(d2, axis=1)  # first minimum keeps the row-major rule
        idx[s : s + 512] = k
        dist[s : s + 512] = np.sqrt(d2[np.arange(len(block)), k])
    return bg, fg, dist, idx


def weighted_fmeasure(pred, gt, beta2: float = 1.0) -> float:
    """F-measure with boundary-aware error weighting.

    Background errors inherit the error at their nearest foreground pixel
    (Gaussian-smoothed, 7x7 window, sigma 5) and are scaled by a
    distance-decay importance in [1, 2); empty masks score 1 only for an
    all-zero prediction.
    """
    p, g = _eval_pair(pred, gt)
    if not g.any():
        return 1.0 if not p.any() else 0.0

    err = np.abs(p - g)
    err_t = err.copy()
    dist_map = np.zeros_like(err)
    if not g.all():
        bg, fg, dist, idx = nearest_foreground(g)
        err_t[bg[:, 0], bg[:, 1]] = err[fg[idx, 0], fg[idx, 1]]
        dist_map[bg[:, 0], bg[:, 1]] = dist
    smoothed = ndimage.correlate(err_t, _gaussian_kernel(), mode="constant")
    err_min = np.where(g & (smoothed < err), smoothed, err)
    importance = np.ones_like(err)
    importance[~g] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist_map[~g])
    ew = err_min * importance

    n_fg = g.sum()
    tp_w = n_fg - ew[g].sum()
    fp_w = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tp_w / (EPS + tp_w + fp_w)
    if recall == 0.0 and precision == 0.0:
        return 0.0
    return float(
        (1.0 + beta2) * recall * precision / (EPS + recall + beta2 * precision)
    )


# -- aggregation and report emission ------------------------------------------

COLUMNS = ("mDice", "mIoU", "wFm", "Sm", "Em", "MAE_x100")


@dataclass
class MetricReport:
    """Dataset-mean scores; raw values in [0, 1], error scaled x100 in tables."""

    mdice: float
    miou: float
    wfm: float
    smeasure: float
    emeasure: float
    mae: float
    count: int

    def row(self) -> tuple:
        return (self.mdice, self.miou, self.wfm, self.smeasure,
                self.emeasure, self.mae * 100.0)

    def to_csv(self) -> str:
        head = ",".join(COLUMNS)
        vals = ",".join(f"{v:.6f}" for v in self.row())
        return f"{head}\n{vals}\n"

    def to_table(self) -> str:
        cells = [f"{v:.4f}" for v in self.row()]
        widths = [max(len(c), len(h)) for c, h in zip(cells, COLUMNS)]
        head = "  ".join(h.rjust(w) for h, w in zip(COLUMNS, widths))
        body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{head}\n{body}\n(n={self.count})\n"


def evaluate_pair(pred, gt) -> tuple:
    """The six per-image scores in report column order (raw error, not x100)."""
    d, i = mdice_miou(pred, gt)
    return (d, i, weighted_fmeasure(pred, gt), s_measure(pred, gt),
            e_measure_max(pred, gt), mae(pred, gt))


def evaluate_dataset(pairs) -> MetricReport:
    """Mean of per-image scores over (prediction, mask) pairs."""
    rows = [evaluate_pair(p, g) for p, g in pairs]
    if not rows:
        raise ContractError("cannot evaluate an empty dataset")
    means = np.asarray(rows).mean(axis=0)
    return MetricReport(*[float(v) for v in means], count=len(rows))
