"""Dense float64 tensors with a define-by-run gradient tape.

Conventions used throughout the package:

* every tensor is float64 and row-major; feature maps are height x width x
  channels
* binary ops broadcast under numpy's trailing-dimension rules
* every forward op checks its output for NaN/Inf and raises NumericsError
  instead of propagating garbage
* gradients are recorded on an explicit `Tape`; without an active tape the
  same functions run plain forward math (the inference path)
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, NumericsError, ShapeError

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape():
    """The innermost recording tape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    """One recorded op: its inputs plus one gradient closure per input."""

    __slots__ = ("op", "inputs", "grad_fns", "output")

    def __init__(self, op, inputs, grad_fns, output):
        self.op = op
        self.inputs = inputs
        self.grad_fns = grad_fns
        self.output = output


class Tensor:
    """Immutable float64 array, optionally attached to the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created from non-finite values")
        self.data = arr
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """A copy of the value with no tape history (treated as constant)."""
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        taped = "" if self.node is None else f", op={self.node.op}"
        return f"Tensor(shape={self.shape}{taped})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op, out_data, inputs, grad_fns) -> Tensor:
    arr = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.node = None
    tape = active_tape()
    if tape is not None:
        node = Node(op, tuple(inputs), tuple(grad_fns), out)
        out.node = node
        tape._append(node)
    return out


class Tape:
    """Append-only op record, walked once in reverse creation order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: set[int] = set()

    def _append(self, node: Node) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, loss: Tensor) -> "GradientMap":
        """Gradients of a scalar loss w.r.t. every leaf reachable from it.

        Fan-out accumulates additively; leaves the loss never touched simply
        stay absent and read back as zeros.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.shape != ():
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.node is None or id(loss.node) not in self._ids:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[Tensor, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            gout = grads.pop(node.output, None)
            if gout is None:
                continue
            for inp, fn in zip(node.inputs, node.grad_fns):
                if fn is None:
                    continue
                contrib = fn(gout)
                prev = grads.get(inp)
                grads[inp] = contrib if prev is None else prev + contrib
        return GradientMap(grads)


class GradientMap:
    """Gradients keyed by tensor identity; unreached leaves read as zeros."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, ref) -> np.ndarray:
        t = ref.tensor if hasattr(ref, "tensor") else ref
        g = self._grads.get(t)
        if g is None:
            return np.zeros(t.data.shape, dtype=np.float64)
        return np.asarray(g, dtype=np.float64).reshape(t.data.shape)

    def __contains__(self, ref) -> bool:
        t = ref.tensor if hasattr(ref, "tensor") else ref
        return t in self._grads


# -- broadcasting helpers ---------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeError(
            f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}"
        ) from exc


# -- elementwise binary ops -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return _emit(
        "div",
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


# -- elementwise unary ops --------------------------------------------------


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), (lambda g: -g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), (lambda g: g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,), (lambda g: g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), (lambda g: g * 0.5 / out,))


def power(x, p) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data**p
        return _emit("power", out, (x,), (lambda g: g * p * x.data ** (p - 1.0),))


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_arr(x.data)
    return _emit("sigmoid", out, (x,), (lambda g: g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), (lambda g: g * (1.0 - out * out),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_arr(x.data)
    return _emit(
        "silu",
        x.data * s,
        (x,),
        (lambda g: g * s * (1.0 + x.data * (1.0 - s)),),
    )


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _emit("softplus", out, (x,), (lambda g: g * _sigmoid_arr(x.data),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes only through unclipped entries."""
    x = as_tensor(x)
    if not lo < hi:
        raise ConfigError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(
        "clamp",
        np.clip(x.data, lo, hi),
        (x,),
        (lambda g: g * inside,),
    )


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "silu": silu,
    "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name ('mul', 'silu', ...)."""
    if b is None:
        if kind not in _UNARY:
            raise ConfigError(f"unknown unary op kind {kind!r}")
        return _UNARY[kind](a)
    if kind not in _BINARY:
        raise ConfigError(f"unknown binary op kind {kind!r}")
    return _BINARY[kind](a, b)


# -- contractions -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2d @ 2d, or batched 3d @ 3d with equal leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    else:
        raise ShapeError(
            f"matmul supports 2d@2d or 3d@3d, got {ad.shape} @ {bd.shape}"
        )
    return _emit(
        "matmul",
        ad @ bd,
        (a, b),
        (
            lambda g: g @ np.swapaxes(bd, -1, -2),
            lambda g: np.swapaxes(ad, -1, -2) @ g,
        ),
    )


def conv2d(x, weights, bias=None) -> Tensor:
    """Same-padded stride-1 convolution of an HWC map with an odd kernel.

    weights: (k, k, c_in, c_out). Zero padding of width k//2 keeps extents.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weights {weights.shape}")
    hh, ww, cin = x.shape
    k, k2, cin_w, cout = weights.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel must be odd, got {k}")
    if cin_w != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weights expect {cin_w}")
    pad_w = k // 2
    xp = np.pad(x.data, ((pad_w, pad_w), (pad_w, pad_w), (0, 0)))
    cols = np.empty((hh, ww, k, k, cin), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj, :] = xp[di : di + hh, dj : dj + ww, :]
    cols2 = cols.reshape(hh * ww, k * k * cin)
    wmat = weights.data.reshape(k * k * cin, cout)
    out = (cols2 @ wmat).reshape(hh, ww, cout)

    def grad_x(g):
        gcols = (g.reshape(hh * ww, cout) @ wmat.T).reshape(hh, ww, k, k, cin)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[di : di + hh, dj : dj + ww, :] += gcols[:, :, di, dj, :]
        return gxp[pad_w : pad_w + hh, pad_w : pad_w + ww, :]

    def grad_w(g):
        return (cols2.T @ g.reshape(hh * ww, cout)).reshape(k, k, cin, cout)

    inputs = [x, weights]
    grad_fns = [grad_x, grad_w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")
        out = out + bias.data
        inputs.append(bias)
        grad_fns.append(lambda g: g.sum(axis=(0, 1)))
    return _emit("conv2d", out, inputs, grad_fns)


# -- normalizing / reducing -------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Rows sum to one; the max is subtracted first so |x| up to 1e4 is safe."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_x(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _emit("softmax", out, (x,), (grad_x,))


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce axis {ax} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduce axes {axes}")
    return tuple(sorted(norm))


def reduce(x, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over the given axes (all axes when axis is None)."""
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ConfigError(f"unknown reduce kind {kind!r}")
    axes = _norm_axes(axis, x.ndim)
    if axes is None:
        count = x.data.size
        out = x.data.sum(keepdims=keepdims)
    else:
        count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
        out = x.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count

    def grad_x(g):
        gg = np.asarray(g, dtype=np.float64)
        if not keepdims and axes is not None and axes:
            gg = np.expand_dims(gg, axes)
        gg = np.broadcast_to(gg, x.data.shape)
        return gg / count if kind == "mean" else gg.copy()

    return _emit(kind, out, (x,), (grad_x,))


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _emit("reshape", out.copy(), (x,), (lambda g: g.reshape(x.data.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(
        "transpose",
        x.data.transpose(axes).copy(),
        (x,),
        (lambda g: g.transpose(inv),),
    )


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along {axis}") from exc
    ax = axis % out.ndim
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(lo, hi):
        key = (slice(None),) * ax + (slice(lo, hi),)
        return lambda g: g[key]

    grad_fns = [make_grad(int(lo), int(hi)) for lo, hi in zip(offsets[:-1], offsets[1:])]
    return _emit("concat", out, parts, grad_fns)


def pad(x, pads) -> Tensor:
    """Zero-pad with per-axis (before, after) widths."""
    x = as_tensor(x)
    pads = tuple((int(b), int(a)) for b, a in pads)
    if len(pads) != x.ndim:
        raise ShapeError(f"pad widths {pads} do not match ndim {x.ndim}")
    out = np.pad(x.data, pads)
    inner = tuple(slice(b, b + n) for (b, _), n in zip(pads, x.data.shape))
    return _emit("pad", out, (x,), (lambda g: g[inner],))


def take_slice(x, key) -> Tensor:
    """Basic indexing (ints and unit-step slices); gradient scatters back."""
    x = as_tensor(x)
    if not isinstance(key, tuple):
        key = (key,)
    for entry in key:
        if isinstance(entry, (int, np.integer)):
            continue
        if isinstance(entry, slice) and entry.step in (None, 1):
            continue
        raise ShapeError(f"slice supports ints and unit-step slices, got {entry!r}")
    out = x.data[key]

    def grad_x(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return full

    return _emit("slice", np.array(out, copy=True), (x,), (grad_x,))


def flip(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"flip axis {axis} out of range for shape {x.shape}")
    return _emit(
        "flip",
        np.flip(x.data, axis=axis).copy(),
        (x,),
        (lambda g: np.flip(g, axis=axis).copy(),),
    )


def take_rows(x, indices) -> Tensor:
    """Gather rows of a 2d tensor; gradient scatter-adds them back."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects 2d input, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows indices must be 1d")
    out = x.data[idx]

    def grad_x(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return full

    return _emit("take_rows", out, (x,), (grad_x,))


def scatter_add_rows(x, indices, rows) -> Tensor:
    """out = x with rows[j] added at row indices[j] (functional, no aliasing)."""
    x, rows = as_tensor(x), as_tensor(rows)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or rows.ndim != 2:
        raise ShapeError("scatter_add_rows expects 2d tensors")
    if rows.shape != (idx.size, x.shape[1]):
        raise ShapeError(
            f"scatter_add_rows: rows {rows.shape} vs {(idx.size, x.shape[1])}"
        )
    out = x.data.copy()
    np.add.at(out, idx, rows.data)
    return _emit(
        "scatter_add_rows",
        out,
        (x, rows),
        (lambda g: g, lambda g: g[idx]),
    )


# -- resampling ---------------------------------------------------------------


def _linear_taps(n_in: int, n_out: int):
    # pixel-center sampling, align-corners=false
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def resize_bilinear(x, out_hw) -> Tensor:
    """Bilinear resize of the leading two axes of an HW or HWC tensor."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"resize_bilinear expects 2d or 3d input, got {x.shape}")
    h2, w2 = int(out_hw[0]), int(out_hw[1])
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"resize target {out_hw} must be positive")
    h, w = x.shape[:2]
    i0, i1, wy0, wy1 = _linear_taps(h, h2)
    j0, j1, wx0, wx1 = _linear_taps(w, w2)
    tail = (1,) * (x.ndim - 2)
    cy0, cy1 = wy0.reshape(-1, 1, *tail), wy1.reshape(-1, 1, *tail)
    cx0, cx1 = wx0.reshape(1, -1, *tail), wx1.reshape(1, -1, *tail)
    r0, r1 = x.data[i0], x.data[i1]
    top = r0[:, j0] * cx0 + r0[:, j1] * cx1
    bot = r1[:, j0] * cx0 + r1[:, j1] * cx1
    out = top * cy0 + bot * cy1
    ii0, ii1 = i0.reshape(-1, 1), i1.reshape(-1, 1)
    jj0, jj1 = j0.reshape(1, -1), j1.reshape(1, -1)

    def grad_x(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (ii0, jj0), g * (cy0 * cx0))
        np.add.at(full, (ii0, jj1), g * (cy0 * cx1))
        np.add.at(full, (ii1, jj0), g * (cy1 * cx0))
        np.add.at(full, (ii1, jj1), g * (cy1 * cx1))
        return full

    return _emit("resize_bilinear", out, (x,), (grad_x,))


def resize_nearest(x, out_hw) -> Tensor:
    """Nearest-neighbor resize (pixel-center convention) of leading two axes."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"resize_nearest expects 2d or 3d input, got {x.shape}")
    h2, w2 = int(out_hw[0]), int(out_hw[1])
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"resize target {out_hw} must be positive")
    h, w = x.shape[:2]
    ii = np.minimum(((np.arange(h2) + 0.5) * h / h2).astype(np.int64), h - 1)
    jj = np.minimum(((np.arange(w2) + 0.5) * w / w2).astype(np.int64), w - 1)
    out = x.data[ii][:, jj]
    gi, gj = ii.reshape(-1, 1), jj.reshape(1, -1)

    def grad_x(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (gi, gj), g)
        return full

    return _emit("resize_nearest", out, (x,), (grad_x,))
