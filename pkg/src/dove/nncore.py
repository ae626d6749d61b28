"""Differentiable numpy compute core.

A small reverse-mode autodiff engine: float32 tensors, a recording tape,
the op set needed for conv/transformer models (dense, conv, attention,
normalization), sinusoidal timestamp encodings, an Adam optimizer with
global-norm clipping, and a finite-difference gradient checker.

Tensors are treated as immutable values once created; gradients accumulate
on the `.grad` slot during `Tape.backward`. Recording only happens inside
an active `Tape` context, so inference runs tape-free at full speed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf


class NNCoreError(Exception):
    pass


class ShapeMismatch(NNCoreError):
    """Raised when op inputs have incompatible shapes."""


class MaskError(NNCoreError):
    """Raised when an attention mask row allows no keys."""


class NonFiniteError(NNCoreError):
    """Raised when a NaN/Inf shows up in checked mode, or in a loss."""


class ConfigError(NNCoreError):
    pass


# NaN scanning after every op. On in tests, off in timed runs.
_CHECKED = False


def set_checked(on: bool) -> None:
    global _CHECKED
    _CHECKED = bool(on)


def checked_mode() -> bool:
    return _CHECKED


# Names of every tape-recorded op, appended at definition time. The test
# suite iterates this list to guarantee grad coverage of the full op set.
REGISTERED_OPS: list[str] = []


def _op_name(name: str) -> str:
    REGISTERED_OPS.append(name)
    return name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __getitem__(self, key) -> "Tensor":
        return slice_(self, key)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)) and like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


# ---------------------------------------------------------------------------
# Tape


_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops; backward replays it in exact reverse."""

    def __init__(self):
        self.entries: list[tuple[str, Tensor, object]] = []

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise NNCoreError("nested tapes are not supported")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for _name, out, bw in reversed(self.entries):
            if out.grad is None:
                continue
            bw(out.grad)


def _record(name: str, out: Tensor, backward_fn) -> None:
    if _CHECKED and not np.isfinite(out.data).all():
        raise NonFiniteError(f"non-finite values produced by op '{name}'")
    if _TAPE is not None and out.requires_grad:
        _TAPE.entries.append((name, out, backward_fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise ops


OP_ADD = _op_name("add")


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(OP_ADD, out, bw)
    return out


OP_SUB = _op_name("sub")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    _record(OP_SUB, out, bw)
    return out


OP_MUL = _op_name("mul")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(OP_MUL, out, bw)
    return out


OP_NEG = _op_name("neg")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, -g)

    _record(OP_NEG, out, bw)
    return out


OP_EXP = _op_name("exp")


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * out.data)

    _record(OP_EXP, out, bw)
    return out


OP_LOG = _op_name("log")


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g / a.data)

    _record(OP_LOG, out, bw)
    return out


OP_SOFTPLUS = _op_name("softplus")


def softplus(a: Tensor) -> Tensor:
    # max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))),
                 requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g / (1.0 + np.exp(-x)))

    _record(OP_SOFTPLUS, out, bw)
    return out


OP_SIGMOID = _op_name("sigmoid")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = Tensor(y, requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    _record(OP_SIGMOID, out, bw)
    return out


OP_RELU = _op_name("relu")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * (a.data > 0))

    _record(OP_RELU, out, bw)
    return out


OP_GELU = _op_name("gelu")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(x.dtype), requires_grad=a.requires_grad)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, (g * (cdf + x * pdf)).astype(x.dtype))

    _record(OP_GELU, out, bw)
    return out


OP_CLAMP = _op_name("clamp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=a.requires_grad)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    _record(OP_CLAMP, out, bw)
    return out


# ---------------------------------------------------------------------------
# Shape ops


OP_STRAIGHT_THROUGH = _op_name("straight_through")


def straight_through(a: Tensor, value) -> Tensor:
    """Forward the given value; backward treats the op as identity on `a`.

    The estimator behind quantization: the output is bit-equal to `value`
    while gradients pass through to `a` unchanged.
    """
    value = np.asarray(value, dtype=a.dtype)
    if value.shape != a.shape:
        raise ShapeMismatch(f"straight_through: value shape {value.shape} != input {a.shape}")
    out = Tensor(value, requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g)

    _record(OP_STRAIGHT_THROUGH, out, bw)
    return out


OP_RESHAPE = _op_name("reshape")


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    _record(OP_RESHAPE, out, bw)
    return out


OP_TRANSPOSE = _op_name("transpose")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    _record(OP_TRANSPOSE, out, bw)
    return out


OP_CONCAT = _op_name("concat")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    _record(OP_CONCAT, out, bw)
    return out


OP_SLICE = _op_name("slice")


def slice_(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], requires_grad=a.requires_grad)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        _accum(a, ga)

    _record(OP_SLICE, out, bw)
    return out


# ---------------------------------------------------------------------------
# Reductions


OP_SUM = _op_name("sum")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    _record(OP_SUM, out, bw)
    return out


OP_MEAN = _op_name("mean")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(g, a.shape) / count).astype(a.dtype))

    _record(OP_MEAN, out, bw)
    return out


OP_VAR = _op_name("variance")


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof=0)."""
    mu = a.data.mean(axis=axis, keepdims=True)
    out = Tensor(((a.data - mu) ** 2).mean(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(g, a.shape) * 2.0 * (a.data - mu) / count).astype(a.dtype))

    _record(OP_VAR, out, bw)
    return out


# ---------------------------------------------------------------------------
# Linear algebra


OP_MATMUL = _op_name("matmul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape).astype(a.dtype))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape).astype(b.dtype))

    _record(OP_MATMUL, out, bw)
    return out


OP_EMBED = _op_name("embedding_lookup")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding_lookup: ids out of range for table {table.shape}")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    _record(OP_EMBED, out, bw)
    return out


# ---------------------------------------------------------------------------
# Softmax family


OP_SOFTMAX = _op_name("softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(x.dtype), requires_grad=a.requires_grad)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (y * (g - dot)).astype(x.dtype))

    _record(OP_SOFTMAX, out, bw)
    return out


OP_MASKED_SOFTMAX = _op_name("masked_softmax")


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax that assigns exactly zero weight to masked-out positions.

    `mask` is a boolean array broadcastable to `logits.shape`; True means
    the position may receive weight. Any row with no allowed position is
    an error (it would have no valid normalization).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=axis).all():
        raise MaskError("masked_softmax: some row allows no position")
    x = logits.data
    neg = np.array(-np.inf, dtype=x.dtype)
    rowmax = np.where(mask, x, neg).max(axis=axis, keepdims=True)
    e = np.exp(x - rowmax) * mask
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(x.dtype), requires_grad=logits.requires_grad)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(logits, (y * (g - dot)).astype(x.dtype))

    _record(OP_MASKED_SOFTMAX, out, bw)
    return out


# ---------------------------------------------------------------------------
# Layer normalization


OP_LAYERNORM = _op_name("layernorm")


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layernorm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor((xhat * gain.data + bias.data).astype(x.dtype),
                 requires_grad=a.requires_grad or gain.requires_grad or bias.requires_grad)

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0).astype(x.dtype))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0).astype(x.dtype))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (inv * (gx - m1 - xhat * m2)).astype(x.dtype))

    _record(OP_LAYERNORM, out, bw)
    return out


# ---------------------------------------------------------------------------
# Convolutions (3x3 kernels, stride 1 or 2, zero padding 1)


def _check_conv_args(name, x, w, stride):
    if x.ndim != 4:
        raise ShapeMismatch(f"{name}: input must be NHWC, got {x.shape}")
    if w.ndim != 4 or w.shape[0] != 3 or w.shape[1] != 3:
        raise ShapeMismatch(f"{name}: weights must be (3,3,Cin,Cout), got {w.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"{name}: stride must be 1 or 2, got {stride}")
    if x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"{name}: channels differ, input {x.shape} vs weights {w.shape}")


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, 3, 3, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3))
    return np.ascontiguousarray(win).reshape(n, ho, wo, 9 * c)


def _col2im(cols: np.ndarray, xp_shape, ho: int, wo: int, stride: int) -> np.ndarray:
    n, hp, wp, c = xp_shape
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, 3, 3, c)
    for ki in range(3):
        for kj in range(3):
            xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += cols[:, :, :, ki, kj, :]
    return xp


OP_CONV2D = _op_name("conv2d")


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution over NHWC input, zero padding 1, stride 1 or 2."""
    _check_conv_args("conv2d", x, w, stride)
    n, h, wd, ci = x.shape
    co = w.shape[3]
    ho = (h + 2 - 3) // stride + 1
    wo = (wd + 2 - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, ho, wo, stride)
    out = Tensor(cols @ w.data.reshape(9 * ci, co),
                 requires_grad=x.requires_grad or w.requires_grad)

    def bw(g):
        if w.requires_grad:
            gw = cols.reshape(-1, 9 * ci).T @ g.reshape(-1, co)
            _accum(w, gw.reshape(3, 3, ci, co))
        if x.requires_grad:
            dcols = g @ w.data.reshape(9 * ci, co).T
            dxp = _col2im(dcols, xp.shape, ho, wo, stride)
            _accum(x, dxp[:, 1:h + 1, 1:wd + 1, :])

    _record(OP_CONV2D, out, bw)
    return out


OP_CONV2D_T = _op_name("transposed_conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of conv2d: upsamples spatial dims by `stride`.

    Weights are (3,3,Cin,Cout); output is (N, H*stride, W*stride, Cout).
    """
    _check_conv_args("transposed_conv2d", x, w, stride)
    n, h, wd, ci = x.shape
    co = w.shape[3]
    # (Cin, 9*Cout) so each input position emits a 3x3xCout patch
    wm = w.data.reshape(9, ci, co).transpose(1, 0, 2).reshape(ci, 9 * co)
    cols = (x.data.reshape(-1, ci) @ wm).reshape(n, h, wd, 9 * co)
    hp, wp = (h - 1) * stride + 3, (wd - 1) * stride + 3
    ypad = _col2im(cols, (n, hp, wp, co), h, wd, stride)
    out = Tensor(ypad[:, 1:1 + h * stride, 1:1 + wd * stride, :],
                 requires_grad=x.requires_grad or w.requires_grad)

    def bw(g):
        gpad = np.zeros((n, hp, wp, co), dtype=g.dtype)
        gpad[:, 1:1 + h * stride, 1:1 + wd * stride, :] = g
        dcols = _im2col(gpad, h, wd, stride)
        if x.requires_grad:
            _accum(x, (dcols.reshape(-1, 9 * co) @ wm.T).reshape(x.shape))
        if w.requires_grad:
            gwm = x.data.reshape(-1, ci).T @ dcols.reshape(-1, 9 * co)
            _accum(w, gwm.reshape(ci, 9, co).transpose(1, 0, 2).reshape(3, 3, ci, co))

    _record(OP_CONV2D_T, out, bw)
    return out


# ---------------------------------------------------------------------------
# Attention


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a boolean attendance mask.

    q, k, v: (B, L, D) with D divisible by `heads`. `mask` is (Lq, Lk) or
    (B, Lq, Lk), True where attendance is allowed. Masked positions get
    exactly zero weight.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeMismatch(f"attention: expected (B,L,D) inputs, got {q.shape}/{k.shape}/{v.shape}")
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads != 0:
        raise ConfigError(f"attention: model dim {d} not divisible by {heads} heads")
    if k.shape != (b, lk, d) or v.shape != (b, lk, d):
        raise ShapeMismatch(f"attention: k/v shapes {k.shape}/{v.shape} do not match q {q.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape not in ((lq, lk), (b, lq, lk)):
        raise ShapeMismatch(f"attention: mask shape {mask.shape} does not match ({lq},{lk})")
    dk = d // heads

    def split(t):  # (B,L,D) -> (B,heads,L,dk)
        return transpose(reshape(t, (b, -1, heads, dk)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    logits = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    mask4 = mask[None, None] if mask.ndim == 2 else mask[:, None]
    weights = masked_softmax(logits, mask4, axis=-1)
    ctx = matmul(weights, vh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (b, lq, d))


# ---------------------------------------------------------------------------
# Sinusoidal timestamp encodings


def sinusoidal_encode(t: int, d: int) -> np.ndarray:
    """Periodic encoding of timestamp t: even dims sin, odd dims cos."""
    if d % 2 != 0:
        raise ConfigError(f"sinusoidal_encode: dimension must be even, got {d}")
    k = np.arange(d // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * k / d)
    enc = np.empty(d, dtype=np.float64)
    enc[0::2] = np.sin(t * freq)
    enc[1::2] = np.cos(t * freq)
    return enc.astype(np.float32)


def timestamp_table(k: int, d: int) -> np.ndarray:
    """Encodings for timestamps 1..k, stacked (k, d)."""
    return np.stack([sinusoidal_encode(t, d) for t in range(1, k + 1)])


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected Adam with global-norm gradient clipping.

    `groups` is a list of dicts: {"params": {name: Tensor}, "lr": float}.
    Clipping is computed over all gradients in all groups jointly; params
    with no gradient are treated as having zero gradient.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.groups = []
        seen: set[str] = set()
        for g in groups:
            names = list(g["params"].keys())
            for n in names:
                if n in seen:
                    raise ConfigError(f"Adam: duplicate parameter name '{n}'")
                seen.add(n)
            self.groups.append({"params": dict(g["params"]), "lr": float(g["lr"])})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for g in self.groups for n, p in g["params"].items()}
        self.v = {n: np.zeros_like(p.data) for g in self.groups for n, p in g["params"].items()}

    def _all_params(self):
        for g in self.groups:
            for n, p in g["params"].items():
                yield n, p, g["lr"]

    def step(self) -> None:
        self.t += 1
        grads = {}
        sq = 0.0
        for n, p, _lr in self._all_params():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"NaN/Inf gradient for '{n}' at optimizer step {self.t}")
            grads[n] = g
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = np.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p, lr in self._all_params():
            g = grads[n] * scale if scale != 1.0 else grads[n]
            m = self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            v = self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _n, p, _lr in self._all_params():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f, params: list[Tensor], eps: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences.

    `f(params) -> scalar Tensor` must be deterministic. Params are copied
    to float64 so finite differences are not drowned by float32 roundoff;
    the relative error uses max(|analytic|, |numeric|, 1) as the scale.
    """
    p64 = [Tensor(p.data.astype(np.float64), requires_grad=True, name=p.name)
           for p in params]
    with Tape() as tape:
        loss = f(p64)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("grad_check: non-finite loss")
        tape.backward(loss)
    worst = 0.0
    for p in p64:
        ag = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        agf = np.asarray(ag, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(p64).data)
            flat[i] = orig - eps
            f_minus = float(f(p64).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(agf[i] - fd) / max(abs(agf[i]), abs(fd), 1.0)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Initializers (seeded by the caller's Generator)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


def he_init(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def zeros_init(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def ones_init(shape) -> np.ndarray:
    return np.ones(shape, dtype=np.float32)
