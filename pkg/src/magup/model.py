"""End-to-end segmentation model and its two-stage trainer.

Pipeline: patch-token transformer encoder (with a plug-in adapter per block)
-> coarse pseudo-mask head -> mask-prompt encoder -> two-way-attention mask
decoder. Boundary distillation attaches to the last encoder block's output
during training only.

Stage 1 fits the pseudo-mask head (plus adapters and the distiller) against
ground truth; stage 2 fits the prompt encoder and decoder on the refined
output while the head is left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapter import MaGuPAdapter, MaGuPConfig
from .bdc import BDCConfig, BoundaryDistiller, downsample_mask
from .errors import ConfigError, ContractError, ShapeError
from .layers import LayerNorm, Linear, depth_to_space, space_to_depth
from .metrics import MetricReport, combined_loss, evaluate_dataset
from .optim import Parameter, adam_step
from .rng import Rng
from .tensor import Tensor


@dataclass
class EncoderConfig:
    """Backbone shape plus the per-block adapter wiring."""

    image_size: int = 352
    patch_size: int = 8
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    adapter: MaGuPConfig | None = field(default_factory=MaGuPConfig)
    freeze_backbone: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch "
                f"{self.patch_size}"
            )
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads")
        if min(self.image_size, self.patch_size, self.d_model, self.depth,
               self.heads) < 1:
            raise ConfigError("encoder extents must be >= 1")


@dataclass
class TrainConfig:
    """One stage's optimization knobs."""

    lr: float = 1e-5
    batch: int = 8
    epochs: int = 10
    lambda_distill: float = 1.0
    stage: int = 1
    seed: int = 0
    scale_factors: tuple = (0.75, 1.0, 1.25)

    def __post_init__(self):
        self.scale_factors = tuple(self.scale_factors)
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ConfigError("lr, batch and epochs must be positive")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.scale_factors or min(self.scale_factors) <= 0:
            raise ConfigError("scale factors must be positive")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bdc: BDCConfig | None = field(default_factory=BDCConfig)
    seed: int = 0


# -- attention primitives -----------------------------------------------------


class MultiHeadAttention:
    """Self-attention over a (T, d) token block, heads batched as 3d matmuls."""

    def __init__(self, rng: Rng, d_model: int, heads: int):
        if d_model % heads:
            raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads, self.head_width = heads, d_model // heads
        self.qkv = Linear(rng.child(0), d_model, 3 * d_model)
        self.out = Linear(rng.child(1), d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        tt, d = x.shape
        qkv = self.qkv(x)

        def head_split(i):
            part = qkv[:, i * d : (i + 1) * d]
            return T.transpose(
                T.reshape(part, (tt, self.heads, self.head_width)), (1, 0, 2)
            )

        q, k, v = head_split(0), head_split(1), head_split(2)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), self.head_width**-0.5)
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (tt, d))
        return self.out(merged)

    def named_params(self, prefix: str):
        yield from self.qkv.named_params(f"{prefix}.qkv")
        yield from self.out.named_params(f"{prefix}.out")


class CrossAttention:
    """Single-head scaled dot-product attention between two token blocks."""

    def __init__(self, rng: Rng, d_model: int):
        self.scale = d_model**-0.5
        self.q = Linear(rng.child(0), d_model, d_model)
        self.k = Linear(rng.child(1), d_model, d_model)
        self.v = Linear(rng.child(2), d_model, d_model)
        self.out = Linear(rng.child(3), d_model, d_model)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        scores = T.mul(
            T.matmul(self.q(queries), T.transpose(self.k(context), (1, 0))),
            self.scale,
        )
        return self.out(T.matmul(T.softmax(scores, axis=-1), self.v(context)))

    def named_params(self, prefix: str):
        for name in ("q", "k", "v", "out"):
            yield from getattr(self, name).named_params(f"{prefix}.{name}")


# -- encoder ------------------------------------------------------------------


class EncoderBlock:
    """Pre-norm attention + MLP block with an optional adapter."""

    def __init__(self, rng: Rng, cfg: EncoderConfig):
        d = cfg.d_model
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng.child(0), d, cfg.heads)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(rng.child(1), d, hidden)
        self.fc2 = Linear(rng.child(2), hidden, d)
        self.adapter: MaGuPAdapter | None = None  # installed by Encoder

    def __call__(self, x: Tensor, grid_hw: tuple) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        normed = self.norm2(x)
        m = self.fc2(T.silu(self.fc1(normed)))
        if self.adapter is None:
            return T.add(x, m)
        # the adapter reads normalized features: its scan gates and channel
        # modulation are polynomial in their input, so feeding the raw
        # residual stream would compound block over block
        if self.adapter.cfg.placement == "parallel":
            return T.add(T.add(x, m), self.adapter.delta(normed, grid_hw))
        return T.add(x, self.adapter(m, grid_hw))

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")
        if self.adapter is not None:
            yield from self.adapter.named_params(f"{prefix}.adapter")


class Encoder:
    """Patch embedding, learned positions, transformer blocks, final norm.

    The backbone and the adapters draw from disjoint random streams, so
    toggling adapters on or off never shifts the backbone's initialization.
    """

    def __init__(self, rng: Rng, cfg: EncoderConfig):
        self.cfg = cfg
        self.grid = cfg.image_size // cfg.patch_size
        tokens = self.grid * self.grid
        backbone = rng.child("backbone")
        self.patch = Linear(
            backbone.child("patch"), 3 * cfg.patch_size**2, cfg.d_model
        )
        self.pos = Parameter(
            backbone.child("pos").normal((tokens, cfg.d_model), std=0.02)
        )
        self.blocks = [
            EncoderBlock(backbone.child("block", i), cfg) for i in range(cfg.depth)
        ]
        self.final_norm = LayerNorm(cfg.d_model)
        if cfg.adapter is not None:
            for i, block in enumerate(self.blocks):
                block.adapter = MaGuPAdapter(
                    rng.child("adapter", i), cfg.d_model, cfg.adapter
                )

    def __call__(self, image: Tensor) -> Tensor:
        """image (S, S, 3) -> normalized last-block feature grid (g, g, d).

        The returned grid is also the distillation target surface; taking it
        after the closing norm keeps its scale fixed, which anchors the
        teacher-student loss (an unnormalized tap lets the loss inflate the
        feature norm without bound).
        """
        s = self.cfg.image_size
        if image.shape != (s, s, 3):
            raise ContractError(f"expected ({s}, {s}, 3) image, got {image.shape}")
        g, d = self.grid, self.cfg.d_model
        x = space_to_depth(image, self.cfg.patch_size)
        x = T.reshape(x, (g * g, 3 * self.cfg.patch_size**2))
        x = T.add(self.patch(x), self.pos.tensor)
        for block in self.blocks:
            x = block(x, (g, g))
        return T.reshape(self.final_norm(x), (g, g, d))

    def named_params(self, prefix: str):
        yield from self.patch.named_params(f"{prefix}.patch")
        yield f"{prefix}.pos", self.pos
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.final_norm.named_params(f"{prefix}.final_norm")


# -- heads, prompt, decoder ---------------------------------------------------


LOGIT_BOUND = 12.0


def _squash(logits: Tensor) -> Tensor:
    """Logistic with a soft-clipped input, so outputs stay strictly inside
    (0, 1): an unbounded logit saturates the logistic to exactly 0 or 1 in
    float64 and silences every gradient behind that pixel for good."""
    return T.sigmoid(T.mul(LOGIT_BOUND, T.tanh(T.mul(1.0 / LOGIT_BOUND, logits))))


class PseudoMaskHead:
    """Per-token logit, upsampled to image size, squashed to (0, 1)."""

    def __init__(self, rng: Rng, d_model: int):
        self.proj = Linear(rng, d_model, 1)

    def __call__(self, grid: Tensor, out_hw: tuple) -> Tensor:
        logits = T.resize_bilinear(self.proj(grid), out_hw)
        return T.reshape(_squash(logits), out_hw)

    def named_params(self, prefix: str):
        yield from self.proj.named_params(f"{prefix}.proj")


class PromptEncoder:
    """Downsamples a probability map to grid resolution as a dense prompt.

    Strided downsampling stages halve extents until one patch maps to one
    grid cell; the final projection starts at zero so an untrained prompt
    leaves the image embedding untouched.
    """

    def __init__(self, rng: Rng, patch_size: int, d_model: int, width: int = 16):
        factors = []
        f = patch_size
        while f > 1:
            g = 2 if f % 2 == 0 else f
            factors.append(g)
            f //= g
        self.factors = factors
        self.stages = []
        if not factors:
            self.stages.append(Linear(rng.child(0), 1, d_model, zero_init=True))
            self.factors = [1]
            return
        c_in = 1
        for i, g in enumerate(factors):
            last = i == len(factors) - 1
            c_out = d_model if last else width
            self.stages.append(
                Linear(rng.child(i), c_in * g * g, c_out, zero_init=last)
            )
            c_in = c_out

    def __call__(self, prob_map: Tensor) -> Tensor:
        hh, ww = prob_map.shape
        x = T.reshape(prob_map, (hh, ww, 1))
        for i, (g, stage) in enumerate(zip(self.factors, self.stages)):
            if g > 1:
                x = space_to_depth(x, g)
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.silu(x)
        return x

    def named_params(self, prefix: str):
        for i, stage in enumerate(self.stages):
            yield from stage.named_params(f"{prefix}.stage{i}")


class MaskDecoder:
    """One mask token, two two-way attention rounds, 4x upsampling, dot logits."""

    def __init__(self, rng: Rng, d_model: int, rounds: int = 2):
        if d_model % 4:
            raise ConfigError(f"decoder needs d_model divisible by 4, got {d_model}")
        self.d_model = d_model
        self.token = Parameter(rng.child(0).normal((1, d_model), std=0.02))
        self.rounds = []
        for r in range(rounds):
            rr = rng.child("round", r)
            self.rounds.append(
                {
                    "norm_token": LayerNorm(d_model),
                    "token_to_image": CrossAttention(rr.child(0), d_model),
                    "norm_mlp": LayerNorm(d_model),
                    "mlp_in": Linear(rr.child(1), d_model, 2 * d_model),
                    "mlp_out": Linear(rr.child(2), 2 * d_model, d_model),
                    "norm_image": LayerNorm(d_model),
                    "image_to_token": CrossAttention(rr.child(3), d_model),
                }
            )
        half, quarter = d_model // 2, d_model // 4
        self.up1 = Linear(rng.child(1), d_model, 4 * half)
        self.up2 = Linear(rng.child(2), half, 4 * quarter)
        self.hyper = Linear(rng.child(3), d_model, quarter)

    def __call__(self, grid: Tensor, out_hw: tuple) -> Tensor:
        h, w, d = grid.shape
        img = T.reshape(grid, (h * w, d))
        tok = self.token.tensor
        for r in self.rounds:
            tok = T.add(tok, r["token_to_image"](r["norm_token"](tok), img))
            tok = T.add(tok, r["mlp_out"](T.silu(r["mlp_in"](r["norm_mlp"](tok)))))
            img = T.add(img, r["image_to_token"](r["norm_image"](img), tok))
        feat = T.reshape(img, (h, w, d))
        feat = T.silu(depth_to_space(self.up1(feat), 2))
        feat = T.silu(depth_to_space(self.up2(feat), 2))
        vec = self.hyper(tok)  # (1, d/4)
        logits = T.matmul(
            T.reshape(feat, (16 * h * w, d // 4)), T.transpose(vec, (1, 0))
        )
        probs = _squash(T.reshape(logits, (4 * h, 4 * w, 1)))
        return T.reshape(T.resize_bilinear(probs, out_hw), out_hw)

    def named_params(self, prefix: str):
        yield f"{prefix}.token", self.token
        for i, r in enumerate(self.rounds):
            base = f"{prefix}.round{i}"
            yield from r["norm_token"].named_params(f"{base}.norm_token")
            yield from r["token_to_image"].named_params(f"{base}.token_to_image")
            yield from r["norm_mlp"].named_params(f"{base}.norm_mlp")
            yield from r["mlp_in"].named_params(f"{base}.mlp_in")
            yield from r["mlp_out"].named_params(f"{base}.mlp_out")
            yield from r["norm_image"].named_params(f"{base}.norm_image")
            yield from r["image_to_token"].named_params(f"{base}.image_to_token")
        yield from self.up1.named_params(f"{prefix}.up1")
        yield from self.up2.named_params(f"{prefix}.up2")
        yield from self.hyper.named_params(f"{prefix}.hyper")


# -- the full model -----------------------------------------------------------


class SegModel:
    """Encoder + pseudo-mask head + prompt encoder + decoder (+ distiller)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        enc = cfg.encoder
        self.encoder = Encoder(rng, enc)
        self.head = PseudoMaskHead(rng.child("head"), enc.d_model)
        self.prompt = PromptEncoder(rng.child("prompt"), enc.patch_size, enc.d_model)
        self.decoder = MaskDecoder(rng.child("decoder"), enc.d_model)
        self.distiller = (
            BoundaryDistiller(rng.child("bdc"), enc.d_model, cfg.bdc)
            if cfg.bdc is not None
            else None
        )

    def named_params(self):
        yield from self.encoder.named_params("encoder")
        yield from self.head.named_params("head")
        yield from self.prompt.named_params("prompt")
        yield from self.decoder.named_params("decoder")
        if self.distiller is not None:
            yield from self.distiller.named_params("bdc")

    def param_dict(self) -> dict:
        return dict(self.named_params())

    def trainable(self, stage: int) -> list:
        """(name, Parameter) pairs the given stage's optimizer may update."""
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        chosen = []
        for name, p in self.named_params():
            if name.startswith("encoder."):
                is_adapter = ".adapter." in name
                take = is_adapter or not self.cfg.encoder.freeze_backbone
            elif name.startswith("head."):
                take = stage == 1
            elif name.startswith(("prompt.", "decoder.")):
                take = stage == 2
            else:  # distiller
                take = True
            if take:
                chosen.append((name, p))
        return chosen

    # forward pieces

    def features(self, image) -> Tensor:
        return self.encoder(T.as_tensor(image))

    def pseudo_mask(self, grid: Tensor) -> Tensor:
        s = self.cfg.encoder.image_size
        return self.head(grid, (s, s))

    def decoded_mask(self, grid: Tensor, pseudo: Tensor) -> Tensor:
        s = self.cfg.encoder.image_size
        dec_in = T.add(grid, self.prompt(pseudo))
        return self.decoder(dec_in, (s, s))

    def training_losses(self, image, mask, stage: int, lambda_distill: float = 1.0):
        """Per-sample stage loss: segmentation term + weighted distillation."""
        mask = np.asarray(mask, dtype=np.float64)
        grid = self.features(image)
        pseudo = self.pseudo_mask(grid)
        if stage == 1:
            seg = combined_loss(pseudo, mask)
        elif stage == 2:
            seg = combined_loss(self.decoded_mask(grid, pseudo), mask)
        else:
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        parts = {"seg": seg}
        total = seg
        if self.distiller is not None and lambda_distill != 0.0:
            small = downsample_mask(mask, (self.encoder.grid, self.encoder.grid))
            dist = self.distiller.loss(grid, small)
            total = T.add(seg, T.mul(lambda_distill, dist))
            parts["distill"] = dist
        parts["total"] = total
        return total, parts

    def infer(self, image, mask=None) -> np.ndarray:
        """Probability map (S, S) for one image; refuses mask input."""
        if mask is not None:
            raise ContractError("inference takes no mask input")
        if T.active_tape() is not None:
            raise ContractError("inference must run outside a gradient tape")
        grid = self.features(image)
        pseudo = self.pseudo_mask(grid)
        return self.decoded_mask(grid, pseudo).data


# -- training loop ------------------------------------------------------------


def train_stage(model: SegModel, samples, cfg: TrainConfig) -> dict:
    """Optimize cfg.stage over (image, mask) samples; returns the loss history.

    Batching draws a fresh permutation per epoch; augmentation draws a child
    stream per (epoch, batch, slot), so a fixed seed fixes every arithmetic
    step of the run.
    """
    from .data import augment

    if not samples:
        raise ContractError("training needs at least one sample")
    stage = cfg.stage
    params = model.trainable(stage)
    run = Rng(cfg.seed).child("train", stage)
    size = model.cfg.encoder.image_size
    losses = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = run.child("order", epoch).permutation(n)
        for b0 in range(0, n, cfg.batch):
            batch = order[b0 : b0 + cfg.batch]
            with T.Tape() as tape:
                total = None
                for j, si in enumerate(batch):
                    image, mask = samples[int(si)]
                    image, mask = augment(
                        image, mask, run.child("aug", epoch, b0, j),
                        cfg.scale_factors, size,
                    )
                    term, _ = model.training_losses(
                        image, mask, stage, cfg.lambda_distill
                    )
                    total = term if total is None else T.add(total, term)
                total = T.div(total, float(len(batch)))
                grads = tape.backward(total)
            adam_step([p for _, p in params], grads, cfg.lr)
            losses.append(total.item())
    return {"losses": losses, "final_loss": losses[-1], "stage": stage}


def evaluate_model(model: SegModel, samples) -> MetricReport:
    """Run inference over (image, mask) samples and aggregate the six scores."""
    from .data import fit_to_size

    size = model.cfg.encoder.image_size
    pairs = []
    for image, mask in samples:
        image, mask = fit_to_size(image, mask, size)
        pairs.append((model.infer(image), mask))
    return evaluate_dataset(pairs)
