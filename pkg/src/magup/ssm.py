"""Selective state-space scans and the 1d / 2d blocks built on them.

The recurrence is h_t = exp(dt_t * A) * h_{t-1} + dt_t * B_t * x_t with
y_t = C_t . h_t + D * x_t, where dt, B, C are data-dependent projections of
the input token and A = -exp(a_log) stays strictly negative so every decay
factor lies in (0, 1). Two interchangeable engines evaluate it:

* "naive"  - a plain sequential loop, kept as the reference oracle
* "assoc"  - a Hillis-Steele associative scan over (decay, update) pairs,
             log2(T) vectorized passes, no divisions (numerically safe for
             long sequences)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Linear, RMSNorm
from .optim import Parameter
from .rng import Rng
from .tensor import Tensor


@dataclass
class ScanSequence:
    """A token sequence plus the traversal direction that produced it."""

    tokens: Tensor
    direction: str = "forward"

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"scan sequence needs (T>=1, d), got {self.tokens.shape}")


class SSMParams:
    """Learned parameters of one selective-scan layer.

    dt biases start at softplus^-1 of values log-uniform in [1e-3, 1e-1]
    (the documented default); a_log starts at log(1..d_state) per channel.
    """

    def __init__(self, rng: Rng, d_inner: int, d_state: int = 8):
        if d_inner < 1 or d_state < 1:
            raise ConfigError(f"d_inner={d_inner}, d_state={d_state} must be >= 1")
        self.d_inner, self.d_state = d_inner, d_state
        self.a_log = Parameter(
            np.log(np.tile(np.arange(1.0, d_state + 1.0), (d_inner, 1)))
        )
        self.skip_gain = Parameter(np.ones(d_inner))
        self.dt_proj = Linear(rng.child(0), d_inner, d_inner)
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), (d_inner,)))
        self.dt_proj.b.assign(dt0 + np.log(-np.expm1(-dt0)))  # softplus inverse
        self.b_proj = Linear(rng.child(1), d_inner, d_state, bias=False)
        self.c_proj = Linear(rng.child(2), d_inner, d_state, bias=False)

    def named_params(self, prefix: str):
        yield f"{prefix}.a_log", self.a_log
        yield f"{prefix}.skip_gain", self.skip_gain
        yield from self.dt_proj.named_params(f"{prefix}.dt_proj")
        yield from self.b_proj.named_params(f"{prefix}.b_proj")
        yield from self.c_proj.named_params(f"{prefix}.c_proj")


# -- recurrence engines -------------------------------------------------------


def _assoc_scan(coef: np.ndarray, val: np.ndarray) -> np.ndarray:
    """Inclusive scan of h_t = coef_t * h_{t-1} + val_t with h_{-1} = 0."""
    a = coef.copy()
    h = val.copy()
    offset = 1
    n = len(val)
    while offset < n:
        a_prev = a[:-offset].copy()
        h_prev = h[:-offset].copy()
        h[offset:] += a[offset:] * h_prev
        a[offset:] *= a_prev
        offset *= 2
    return h


def _recurrence_naive(abar, b):
    hs = np.empty_like(b)
    h = np.zeros(b.shape[1:])
    for t in range(b.shape[0]):
        h = abar[t] * h + b[t]
        hs[t] = h
    return hs


def _recurrence(delta_a: Tensor, b: Tensor, c: Tensor, engine: str) -> Tensor:
    """y_t[d] = sum_n h_t[d,n] * c_t[n] for h_t = exp(delta_a_t)*h_{t-1} + b_t."""
    tt, d, n = b.shape
    if delta_a.shape != (tt, d, n) or c.shape != (tt, n):
        raise ShapeError(
            f"recurrence extents: delta_a {delta_a.shape}, b {b.shape}, c {c.shape}"
        )
    abar = np.exp(delta_a.data)
    if engine == "naive":
        hs = _recurrence_naive(abar, b.data)
    else:
        hs = _assoc_scan(abar, b.data)
    y = np.einsum("tdn,tn->td", hs, c.data)
    cd = c.data

    def grads(gy):
        u = gy[:, :, None] * cd[:, None, :]
        if engine == "naive":
            gh = np.empty_like(hs)
            carry = np.zeros((d, n))
            for t in range(tt - 1, -1, -1):
                carry = u[t] + carry
                gh[t] = carry
                carry = abar[t] * carry
        else:
            w = np.flip(u, 0)
            crev = np.concatenate([np.ones((1, d, n)), np.flip(abar, 0)[:-1]])
            gh = np.flip(_assoc_scan(crev, w), 0)
        h_prev = np.concatenate([np.zeros((1, d, n)), hs[:-1]])
        g_delta_a = gh * h_prev * abar
        g_b = gh
        g_c = np.einsum("td,tdn->tn", gy, hs)
        return g_delta_a, g_b, g_c

    cache: dict = {}

    def grad_of(idx):
        def fn(gy):
            # keep a strong ref: an id() key could collide after gc reuse
            if cache.get("gy") is not gy:
                cache["gy"], cache["g"] = gy, grads(gy)
            return cache["g"][idx]

        return fn

    return T._emit(
        f"ssm_recurrence[{engine}]",
        y,
        (delta_a, b, c),
        (grad_of(0), grad_of(1), grad_of(2)),
    )


def _tokens_of(seq) -> Tensor:
    return seq.tokens if isinstance(seq, ScanSequence) else T.as_tensor(seq)


def _scan(seq, params: SSMParams, engine: str) -> Tensor:
    x = _tokens_of(seq)
    tt, d = x.shape
    if d != params.d_inner:
        raise ShapeError(f"scan tokens have width {d}, params expect {params.d_inner}")
    dt = T.softplus(params.dt_proj(x))  # (T, d), strictly positive
    b_mat = params.b_proj(x)  # (T, n)
    c_mat = params.c_proj(x)  # (T, n)
    a = T.neg(T.exp(params.a_log.tensor))  # (d, n), strictly negative
    delta_a = T.mul(T.reshape(dt, (tt, d, 1)), a)
    dbx = T.mul(
        T.reshape(T.mul(dt, x), (tt, d, 1)), T.reshape(b_mat, (tt, 1, params.d_state))
    )
    y = _recurrence(delta_a, dbx, c_mat, engine)
    return T.add(y, T.mul(x, params.skip_gain.tensor))


def selective_scan_naive(seq, params: SSMParams) -> Tensor:
    """Reference evaluation: a pure sequential loop over time steps."""
    return _scan(seq, params, "naive")


def selective_scan(seq, params: SSMParams) -> Tensor:
    """Blocked associative-scan evaluation; equal to the naive loop to 1e-10."""
    return _scan(seq, params, "assoc")


# -- 1d block -----------------------------------------------------------------


@dataclass
class MambaConfig:
    """Shape and wiring of one 1d scan block."""

    d_model: int
    d_inner: int | None = None  # defaults to 2 * d_model
    d_state: int = 8
    conv_kernel: int = 3  # depthwise causal conv width; 0 disables
    bidirectional: bool = False
    share_directions: bool = False

    def __post_init__(self):
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")
        if self.d_inner is None:
            self.d_inner = 2 * self.d_model
        if self.conv_kernel < 0:
            raise ConfigError(f"conv_kernel must be >= 0, got {self.conv_kernel}")


class MambaBlock1D:
    """norm -> (u, z) projection -> conv -> SiLU -> scan -> SiLU(z) gate -> out.

    The output projection starts at zero, so a fresh block is the identity.
    With `bidirectional` the token order is also scanned reversed and the two
    scan outputs merge by sum before gating.
    """

    def __init__(self, rng: Rng, cfg: MambaConfig):
        self.cfg = cfg
        d, di = cfg.d_model, cfg.d_inner
        self.norm = RMSNorm(d)
        self.in_proj = Linear(rng.child(0), d, 2 * di)
        if cfg.conv_kernel:
            k = cfg.conv_kernel
            self.conv_w = Parameter(rng.child(1).normal((k, di), std=k**-0.5))
            self.conv_b = Parameter(np.zeros(di))
        else:
            self.conv_w = self.conv_b = None
        self.scan_fwd = SSMParams(rng.child(2), di, cfg.d_state)
        if cfg.bidirectional:
            self.scan_rev = (
                self.scan_fwd
                if cfg.share_directions
                else SSMParams(rng.child(3), di, cfg.d_state)
            )
        else:
            self.scan_rev = None
        self.out_proj = Linear(rng.child(4), di, d, zero_init=True)

    def _conv(self, u: Tensor) -> Tensor:
        k = self.cfg.conv_kernel
        tt = u.shape[0]
        up = T.pad(u, ((k - 1, 0), (0, 0)))  # causal: look back only
        acc = None
        for j in range(k):
            term = T.mul(up[j : j + tt, :], self.conv_w.tensor[j])
            acc = term if acc is None else T.add(acc, term)
        return T.add(acc, self.conv_b.tensor)

    def __call__(self, x: Tensor) -> Tensor:
        di = self.cfg.d_inner
        r = self.norm(x)
        uz = self.in_proj(r)
        u, z = uz[:, :di], uz[:, di:]
        if self.conv_w is not None:
            u = self._conv(u)
        u = T.silu(u)
        y = selective_scan(u, self.scan_fwd)
        if self.scan_rev is not None:
            y_rev = selective_scan(T.flip(u, 0), self.scan_rev)
            y = T.add(y, T.flip(y_rev, 0))
        y = T.mul(y, T.silu(z))
        return T.add(x, self.out_proj(y))

    def named_params(self, prefix: str):
        yield from self.norm.named_params(f"{prefix}.norm")
        yield from self.in_proj.named_params(f"{prefix}.in_proj")
        if self.conv_w is not None:
            yield f"{prefix}.conv_w", self.conv_w
            yield f"{prefix}.conv_b", self.conv_b
        yield from self.scan_fwd.named_params(f"{prefix}.scan_fwd")
        if self.scan_rev is not None and self.scan_rev is not self.scan_fwd:
            yield from self.scan_rev.named_params(f"{prefix}.scan_rev")
        yield from self.out_proj.named_params(f"{prefix}.out_proj")


# -- 2d cross-scan ------------------------------------------------------------

DIRECTIONS = ("row", "row_rev", "col", "col_rev")


def cross_scan_2d(grid: Tensor) -> list[ScanSequence]:
    """Flatten an (H, W, d) grid along the four raster traversals.

    On the 2x2 grid [[a, b], [c, d]] the orders are (a,b,c,d), (d,c,b,a),
    (a,c,b,d), (d,b,c,a).
    """
    grid = T.as_tensor(grid)
    if grid.ndim != 3:
        raise ShapeError(f"cross_scan_2d expects (H, W, d), got {grid.shape}")
    h, w, d = grid.shape
    if h < 1 or w < 1:
        raise ShapeError(f"cross_scan_2d needs a non-empty grid, got {grid.shape}")
    row = T.reshape(grid, (h * w, d))
    col = T.reshape(T.transpose(grid, (1, 0, 2)), (h * w, d))
    return [
        ScanSequence(row, "row"),
        ScanSequence(T.flip(row, 0), "row_rev"),
        ScanSequence(col, "col"),
        ScanSequence(T.flip(col, 0), "col_rev"),
    ]


def cross_merge_2d(outputs, hw) -> Tensor:
    """Un-permute four direction outputs back to grid order and sum them."""
    h, w = hw
    if len(outputs) != 4:
        raise ShapeError(f"cross_merge_2d expects 4 sequences, got {len(outputs)}")
    seqs = [_tokens_of(s) for s in outputs]
    d = seqs[0].shape[1]
    for s in seqs:
        if s.shape != (h * w, d):
            raise ShapeError(f"merge sequence {s.shape} does not match {(h * w, d)}")
    g_row = T.reshape(seqs[0], (h, w, d))
    g_row_rev = T.reshape(T.flip(seqs[1], 0), (h, w, d))
    g_col = T.transpose(T.reshape(seqs[2], (w, h, d)), (1, 0, 2))
    g_col_rev = T.transpose(T.reshape(T.flip(seqs[3], 0), (w, h, d)), (1, 0, 2))
    return T.add(T.add(g_row, g_row_rev), T.add(g_col, g_col_rev))


class SS2DBlock:
    """Scan a grid along all four raster directions, merge by sum, project."""

    def __init__(self, rng: Rng, channels: int, d_state: int = 8,
                 share_directions: bool = False):
        self.channels = channels
        if share_directions:
            shared = SSMParams(rng.child(0), channels, d_state)
            self.scans = [shared] * 4
        else:
            self.scans = [
                SSMParams(rng.child(i), channels, d_state) for i in range(4)
            ]
        # bias-free so an all-zero grid maps to an all-zero grid for any weights
        self.out_proj = Linear(rng.child(9), channels, channels, bias=False)

    def __call__(self, grid: Tensor) -> Tensor:
        h, w, _ = grid.shape
        seqs = cross_scan_2d(grid)
        ys = [selective_scan(s, p) for s, p in zip(seqs, self.scans)]
        merged = cross_merge_2d(ys, (h, w))
        return self.out_proj(merged)

    def named_params(self, prefix: str):
        if self.scans[0] is self.scans[1]:
            yield from self.scans[0].named_params(f"{prefix}.scan_shared")
        else:
            for name, p in zip(DIRECTIONS, self.scans):
                yield from p.named_params(f"{prefix}.scan_{name}")
        yield from self.out_proj.named_params(f"{prefix}.out_proj")
