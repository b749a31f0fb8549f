"""Plug-in token adapter: multi-scale convs feeding channel / spatial scan streams.

Dataflow per call, on a (H, W, d_model) token grid flattened to (T, d_model):

    down-project + SiLU -> multi-scale conv pyramid -> salient / contextual
    1x1 projections -> channel-scan stream (pooled, gated, skip) and
    spatial-scan stream (four-direction grid scan, gated, no skip) ->
    concat + fuse -> zero-initialized up-projection -> residual add

The up-projection starts at zero, so a freshly built adapter is exactly the
identity on its input. Each of the three enrichment stages (pyramid, channel
stream, spatial stream) can be toggled off; with all three off the adapter
degenerates to a bottleneck: up(silu(down(x))).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .layers import Linear
from .optim import Parameter
from .rng import Rng
from .ssm import MambaBlock1D, MambaConfig, SS2DBlock
from .tensor import Tensor


@dataclass
class MSDConfig:
    """Widths of the three-branch conv pyramid."""

    channels_in: int
    branch_channels: int  # per-branch output width
    kernels: tuple = (3, 5, 7)  # fine-to-coarse

    def __post_init__(self):
        self.kernels = tuple(self.kernels)
        if self.kernels != (3, 5, 7):
            raise ConfigError(f"pyramid kernels must be (3, 5, 7), got {self.kernels}")
        if self.channels_in < 1 or self.branch_channels < 1:
            raise ConfigError("pyramid widths must be >= 1")


@dataclass
class MaGuPConfig:
    """Adapter wiring: bottleneck ratio, stage toggles, stream widths.

    Width fields left at None resolve against d_model: the pyramid emits
    ceil(d_model / (3 r)) channels per branch, both streams run at twice
    that, and the fused output width equals the bottleneck d_model // r.
    """

    reduction: int = 4
    msd: bool = True
    mamba1d: bool = True
    mamba2d: bool = True
    branch_channels: int | None = None  # pyramid per-branch width
    stream_width: int | None = None  # salient / contextual projection width
    out_width: int | None = None  # fused width fed to the up-projection
    d_state: int = 8
    token_width: int = 8  # channel-stream embedding width
    swap_streams: bool = False  # route salient->channel, contextual->spatial
    share_directions: bool = False  # tie the four spatial scan directions
    placement: str = "parallel"  # or "post_mlp"

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if self.placement not in ("parallel", "post_mlp"):
            raise ConfigError(f"unknown adapter placement {self.placement!r}")

    def resolve(self, d_model: int) -> tuple[int, int, int, int]:
        """Concrete (bottleneck, branch, stream, fused) widths for d_model."""
        down = d_model // self.reduction
        if down < 1:
            raise ConfigError(
                f"d_model {d_model} too small for reduction {self.reduction}"
            )
        c0 = self.branch_channels or math.ceil(d_model / (3 * self.reduction))
        c1 = self.stream_width or 2 * c0
        c5 = self.out_width or down
        return down, c0, c1, c5


class MultiScalePyramid:
    """Parallel same-padded convs, outputs stacked coarse-first on channels."""

    def __init__(self, rng: Rng, cfg: MSDConfig):
        self.cfg = cfg
        self.convs = []
        for i, k in enumerate(cfg.kernels):
            std = (k * k * cfg.channels_in) ** -0.5
            w = Parameter(
                rng.child(i).normal((k, k, cfg.channels_in, cfg.branch_channels), std)
            )
            self.convs.append((k, w, Parameter(np.zeros(cfg.branch_channels))))

    def __call__(self, grid: Tensor) -> Tensor:
        outs = [T.conv2d(grid, w.tensor, b.tensor) for _, w, b in self.convs]
        return T.concat(list(reversed(outs)), axis=-1)  # coarse branch on top

    def named_params(self, prefix: str):
        for k, w, b in self.convs:
            yield f"{prefix}.conv{k}_w", w
            yield f"{prefix}.conv{k}_b", b


class ConvBranch:
    """Single k=3 conv used when the multi-scale pyramid is toggled off."""

    def __init__(self, rng: Rng, channels_in: int, channels_out: int):
        std = (9 * channels_in) ** -0.5
        self.w = Parameter(rng.normal((3, 3, channels_in, channels_out), std))
        self.b = Parameter(np.zeros(channels_out))

    def __call__(self, grid: Tensor) -> Tensor:
        return T.conv2d(grid, self.w.tensor, self.b.tensor)

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class ChannelStream:
    """Pooled per-channel scan producing a multiplicative channel modulation.

    Each channel's pooled mean scales a learned embedding row to form one
    token; the token sequence runs through a shared-direction bidirectional
    scan block (order-reversal equivariant by construction), collapses back
    to one scalar per channel, and gates the input: out = x + x * mod.
    The skip term keeps the stream an identity when the scan path is zeroed.
    """

    def __init__(self, rng: Rng, width: int, token_width: int, d_state: int):
        self.width = width
        self.embed = Parameter(
            rng.normal((width, token_width), std=token_width**-0.5)
        )
        self.block = MambaBlock1D(
            rng.child(1),
            MambaConfig(
                d_model=token_width,
                d_state=d_state,
                conv_kernel=0,
                bidirectional=True,
                share_directions=True,
            ),
        )
        self.gate = Linear(rng.child(2), width, width)
        self.readout = Linear(rng.child(3), token_width, 1)

    def __call__(self, x: Tensor) -> Tensor:
        pool = T.reduce(x, "mean", axis=(0, 1))  # (width,)
        tokens = T.mul(T.reshape(pool, (self.width, 1)), self.embed.tensor)
        scanned = self.block(tokens)
        per_channel = T.reshape(self.readout(scanned), (self.width,))
        mod = T.mul(T.silu(self.gate(pool)), per_channel)
        return T.add(x, T.mul(x, mod))

    def named_params(self, prefix: str):
        yield f"{prefix}.embed", self.embed
        yield from self.block.named_params(f"{prefix}.block")
        yield from self.gate.named_params(f"{prefix}.gate")
        yield from self.readout.named_params(f"{prefix}.readout")


class SpatialStream:
    """Four-direction grid scan with a multiplicative gate and no skip path.

    An all-zero grid maps to an all-zero output for any parameter values:
    both the gate projection and the scan output projection are bias-free.
    """

    def __init__(self, rng: Rng, width: int, d_state: int, share_directions: bool):
        self.scan = SS2DBlock(rng.child(0), width, d_state, share_directions)
        self.gate = Linear(rng.child(1), width, width, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return T.mul(T.silu(self.gate(x)), self.scan(x))

    def named_params(self, prefix: str):
        yield from self.scan.named_params(f"{prefix}.scan")
        yield from self.gate.named_params(f"{prefix}.gate")


class MaGuPAdapter:
    """The residual adapter attached to each encoder block."""

    def __init__(self, rng: Rng, d_model: int, cfg: MaGuPConfig):
        self.cfg = cfg
        self.d_model = d_model
        down_w, c0, c1, c5 = cfg.resolve(d_model)
        self.widths = (down_w, c0, c1, c5)
        self.down = Linear(rng.child(0), d_model, down_w)
        self.active = cfg.msd or cfg.mamba1d or cfg.mamba2d
        if self.active:
            if cfg.msd:
                self.pyramid = MultiScalePyramid(
                    rng.child(1), MSDConfig(down_w, c0)
                )
            else:
                self.pyramid = ConvBranch(rng.child(1), down_w, 3 * c0)
            self.salient = Linear(rng.child(2), 3 * c0, c1)
            self.contextual = Linear(rng.child(3), 3 * c0, c1)
            self.channel = (
                ChannelStream(rng.child(4), c1, cfg.token_width, cfg.d_state)
                if cfg.mamba1d
                else None
            )
            self.spatial = (
                SpatialStream(rng.child(5), c1, cfg.d_state, cfg.share_directions)
                if cfg.mamba2d
                else None
            )
            self.fuse = Linear(rng.child(6), 2 * c1, c5)
            up_in = c5
        else:
            self.pyramid = self.salient = self.contextual = None
            self.channel = self.spatial = self.fuse = None
            up_in = down_w
        self.up = Linear(rng.child(7), up_in, d_model, zero_init=True)

    def delta(self, tokens: Tensor, grid_hw: tuple) -> Tensor:
        """The additive refinement for a (T, d_model) token block."""
        h, w = grid_hw
        tt, d = tokens.shape
        if tt != h * w:
            raise ContractError(f"{tt} tokens do not tile a {h}x{w} grid")
        if d != self.d_model:
            raise ShapeError(f"tokens have width {d}, adapter expects {self.d_model}")
        x = T.silu(self.down(tokens))
        if not self.active:
            return self.up(x)
        grid = T.reshape(x, (h, w, self.widths[0]))
        pyr = self.pyramid(grid)
        salient, contextual = self.salient(pyr), self.contextual(pyr)
        if self.cfg.swap_streams:
            salient, contextual = contextual, salient
        chan = self.channel(contextual) if self.channel else contextual
        spat = self.spatial(salient) if self.spatial else salient
        fused = self.fuse(T.concat([chan, spat], axis=-1))
        return T.reshape(self.up(fused), (tt, self.d_model))

    def __call__(self, tokens: Tensor, grid_hw: tuple) -> Tensor:
        return T.add(tokens, self.delta(tokens, grid_hw))

    def named_params(self, prefix: str):
        yield from self.down.named_params(f"{prefix}.down")
        if self.active:
            yield from self.pyramid.named_params(f"{prefix}.pyramid")
            yield from self.salient.named_params(f"{prefix}.salient")
            yield from self.contextual.named_params(f"{prefix}.contextual")
            if self.channel:
                yield from self.channel.named_params(f"{prefix}.channel")
            if self.spatial:
                yield from self.spatial.named_params(f"{prefix}.spatial")
            yield from self.fuse.named_params(f"{prefix}.fuse")
        yield from self.up.named_params(f"{prefix}.up")
