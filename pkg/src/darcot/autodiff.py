"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every op is a plain function that takes :class:`Tensor` inputs, computes the
forward value with numpy and, when gradients are enabled and some input
requires them, attaches a backward closure to the output.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and assigns ``.grad`` on every reachable leaf.

Broadcasting is limited to scalar-with-tensor; all other binary ops require
identical shapes.  Biases and per-channel affine parameters live inside the
ops that need them (``conv2d``, ``linear``, ``layer_norm``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractViolation, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("div: only division by a Python scalar is supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- helpers


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.op is None and not np.isfinite(t.data).all():
            raise NumericError(f"{op}: non-finite input of shape {t.shape}")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: produced non-finite output of shape {data.shape}")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = bw
    else:
        out.op = op
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractViolation(f"{op}: at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=ref.dtype))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=ref.dtype))
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    _check_finite("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    _check_finite("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    _check_finite("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", x.data * mask, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    _check_finite("leaky_relu", x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)

    def bw(g):
        return (g * scale,)

    return _make("leaky_relu", x.data * scale, (x,), bw)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    _check_finite("gelu", x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make("gelu", (xd * cdf).astype(xd.dtype, copy=False), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    _check_finite("tanh", x)
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    _check_finite("softplus", x)
    xd = x.data
    y = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)

    def bw(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * xd)),)

    return _make("softplus", y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x)
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return _make("exp", y, (x,), bw)


def log(x: Tensor) -> Tensor:
    _check_finite("log", x)
    if (x.data <= 0).any():
        raise NumericError("log: non-positive input")
    xd = x.data

    def bw(g):
        return (g / xd,)

    return _make("log", np.log(xd), (x,), bw)


def square(x: Tensor) -> Tensor:
    _check_finite("square", x)
    xd = x.data

    def bw(g):
        return (2.0 * g * xd,)

    return _make("square", xd * xd, (x,), bw)


def abs_(x: Tensor) -> Tensor:
    _check_finite("abs", x)
    s = np.sign(x.data)

    def bw(g):
        return (g * s,)

    return _make("abs", np.abs(x.data), (x,), bw)


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    _check_finite("sqrt", x)
    if (x.data + eps < 0).any():
        raise NumericError("sqrt: negative input")
    y = np.sqrt(x.data + eps)

    def bw(g):
        with np.errstate(divide="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        return (g * d,)

    return _make("sqrt", y, (x,), bw)


# ----------------------------------------------------------- reductions


def _axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % x.ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    _check_finite("sum", x)
    axes = _axes(x, axis)
    shape = x.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep), shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axes)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    _check_finite("mean", x)
    axes = _axes(x, axis)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ContractViolation(f"mean: empty reduction over shape {shape}")
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep) / n, shape).copy(),)

    return _make("mean", np.asarray(x.data.mean(axis=axes)), (x,), bw)


def _norm_axes(x: Tensor, per_sample: bool) -> tuple[int, ...]:
    if per_sample:
        if x.ndim < 1:
            raise ContractViolation("per-sample norm needs a leading batch axis")
        return tuple(range(1, x.ndim))
    return tuple(range(x.ndim))


def l1_norm(x: Tensor, per_sample: bool = False) -> Tensor:
    """Sum of absolute values; subgradient 0 at 0."""
    _check_finite("l1_norm", x)
    axes = _norm_axes(x, per_sample)
    s = np.sign(x.data)

    def bw(g):
        keep = g.reshape(g.shape + (1,) * len(axes))
        return (keep * s,)

    return _make("l1_norm", np.asarray(np.abs(x.data).sum(axis=axes)), (x,), bw)


def l2_norm(x: Tensor, per_sample: bool = False) -> Tensor:
    """Euclidean norm; gradient 0 where the norm is 0."""
    _check_finite("l2_norm", x)
    axes = _norm_axes(x, per_sample)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axes))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (scale.reshape(scale.shape + (1,) * len(axes)) * xd,)

    return _make("l2_norm", np.asarray(n), (x,), bw)


# ------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: cannot reshape {orig} to {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(orig),)

    return _make("reshape", out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def concat_channels(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ContractViolation("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ContractViolation(
                f"concat_channels: incompatible shapes {[t.shape for t in xs]}"
            )
    _check_finite("concat_channels", *xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat_channels", np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select entries along the leading axis."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", x.data[idx], (x,), bw)


# -------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (batch sizes must match)."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ContractViolation(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ContractViolation(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    _check_finite("matmul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape (N, D), w (D, O), b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"linear: shape mismatch {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ContractViolation(f"linear: bias shape {b.shape} for weight {w.shape}")
    parents = (x, w) if b is None else (x, w, b)
    _check_finite("linear", *parents)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make("linear", out, parents, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_finite("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    _check_finite("normalize", x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    y = xd / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make("normalize", y, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize across ``axis`` (channels for NCHW input), then affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ContractViolation(
            f"layer_norm: affine shapes {weight.shape}/{bias.shape} for {c} features"
        )
    _check_finite("layer_norm", x, weight, bias)
    bshape = [1] * x.ndim
    bshape[axis] = c
    w = weight.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * w + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = inv * (
                gh
                - gh.mean(axis=axis, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
            )
        gw = (g * xhat).sum(axis=other) if weight.requires_grad else None
        gb = g.sum(axis=other) if bias.requires_grad else None
        return gx, gw, gb

    return _make("layer_norm", out, (x, weight, bias), bw)


# ------------------------------------------------------------ spatial


def _check_nchw(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ContractViolation(f"{op}: expected NCHW input, got shape {x.shape}")


def _pad2d(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero padding of the last two axes (faster than np.pad for small arrays)."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=x.dtype)
    out[:, :, top : top + h, left : left + w] = x
    return out


def _correlate(xp: np.ndarray, wm: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded input; returns (O, N, Ho, Wo) output and columns."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1 and stride == 1:
        ho, wo = xp.shape[2:]
        cols = xp.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return (wm @ cols).reshape(-1, n, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of NCHW input with an (O, C, k, k) kernel."""
    _check_nchw("conv2d", x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ContractViolation(f"conv2d: kernel {w.shape} does not match input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractViolation(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    parents = (x, w) if b is None else (x, w, b)
    _check_finite("conv2d", *parents)
    n, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    pad = kh // 2 if padding is None else padding
    if pad > kh - 1 or h + 2 * pad < kh or wd_ + 2 * pad < kw:
        raise ContractViolation(f"conv2d: kernel {w.shape} incompatible with input {x.shape}, padding {pad}")
    xp = _pad2d(x.data, pad, pad, pad, pad) if pad else x.data
    wm = w.data.reshape(o, -1)
    out, cols = _correlate(xp, wm, kh, kw, stride)
    if b is not None:
        out += b.data[:, None, None, None]
    ho, wo = out.shape[2:]

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)
        g2 = gt.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride > 1:
                gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            # full correlation with the flipped kernel; extra rows/cols cover
            # inputs that the strided windows never reached
            ph, pw = kh - 1 - pad, kw - 1 - pad
            eh = h - ((ho - 1) * stride + kh - 2 * pad)
            ew = wd_ - ((wo - 1) * stride + kw - 2 * pad)
            if ph or pw or eh or ew:
                gd = _pad2d(gd, ph, ph + eh, pw, pw + ew)
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = _correlate(gd, wf, kh, kw, 1)[0].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make("conv2d", out.transpose(1, 0, 2, 3), parents, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution with a (C, 1, k, k) kernel, stride 1."""
    _check_nchw("depthwise_conv2d", x)
    n, c, h, wd_ = x.shape
    if w.shape[:2] != (c, 1) or w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ContractViolation(f"depthwise_conv2d: kernel {w.shape} for input {x.shape}")
    if b is not None and b.shape != (c,):
        raise ContractViolation(f"depthwise_conv2d: bias {b.shape} for {c} channels")
    parents = (x, w) if b is None else (x, w, b)
    _check_finite("depthwise_conv2d", *parents)
    k = w.shape[2]
    pad = k // 2
    xp = _pad2d(x.data, pad, pad, pad, pad)
    wk = w.data[:, 0]
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + h, j : j + wd_] * wk[:, i, j][None, :, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = (g * xp[:, :, i : i + h, j : j + wd_]).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + wd_] += g * wk[:, i, j][None, :, None, None]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd_]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("depthwise_conv2d", out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    _check_nchw("upsample2x", x)
    _check_finite("upsample2x", x)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return _make("upsample2x", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    _check_nchw("global_avg_pool", x)
    _check_finite("global_avg_pool", x)
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _make("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def fft2_magnitudes(x: Tensor) -> Tensor:
    """Magnitudes of the unnormalized 2-D DFT over the last two axes.

    The gradient at a zero-magnitude coefficient is taken as 0.
    """
    if x.ndim < 2:
        raise ContractViolation(f"fft2_magnitudes: need at least 2 axes, got {x.shape}")
    _check_finite("fft2_magnitudes", x)
    spec = np.fft.fft2(x.data)
    mag = np.abs(spec)
    hw = x.shape[-2] * x.shape[-1]

    def bw(g):
        safe = np.where(mag > 0, mag, 1.0)
        phase = np.where(mag > 0, spec / safe, 0.0)
        # adjoint of the unnormalized DFT is hw * ifft2
        return (np.real(np.fft.ifft2(g * phase)).astype(x.dtype, copy=False) * hw,)

    return _make("fft2_magnitudes", mag.astype(x.dtype, copy=False), (x,), bw)


# ------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Without ``inputs`` every requires-grad leaf reachable from ``loss`` gets
    ``.grad`` assigned (not accumulated across calls).  With ``inputs`` only
    those leaves receive gradients, branches that cannot reach them are
    skipped, and the gradients are returned in order (zeros for unreachable
    inputs).  The graph is released afterwards, so a second call on the same
    loss is a contract violation.
    """
    if loss.shape != ():
        raise ContractViolation(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise ContractViolation("backward: graph already consumed; recompute the forward pass")
    inputs = list(inputs) if inputs is not None else []
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        loss._consumed = True
        return [t.grad for t in inputs] if inputs else None

    order = _topological(loss)
    masked: list[Tensor] = []
    if inputs:
        # hide nodes that cannot reach a requested input so ops skip them
        needed = {id(t) for t in inputs}
        for node in order:
            if id(node) in needed or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
            else:
                masked.append(node)
        for node in masked:
            node.requires_grad = False
    try:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g if g.dtype == node.data.dtype else g.astype(node.data.dtype)
                continue
            if node.requires_grad:
                if g is None:
                    g = np.zeros_like(node.data)
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
    finally:
        for node in masked:
            node.requires_grad = True
    loss._consumed = True
    return [t.grad for t in inputs] if inputs else None


# ---------------------------------------------------- op table / checks


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch an op by name; ``attrs`` are passed as keyword arguments."""
    attrs = attrs or {}
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractViolation(f"forward_op: unknown op kind {kind!r}") from None
    if kind == "concat_channels":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "upsample2x": upsample2x,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "abs": abs_,
    "sqrt": sqrt,
    "softmax": softmax,
    "normalize": normalize,
    "layer_norm": layer_norm,
    "global_avg_pool": global_avg_pool,
    "concat_channels": concat_channels,
    "reshape": reshape,
    "transpose": transpose,
    "take_rows": take_rows,
    "sum": sum,
    "mean": mean,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "fft2_magnitudes": fft2_magnitudes,
}


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    step: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` restricts the probe to a subset of flat indices.
    """
    if step <= 0:
        raise ContractViolation("finite_diff_check: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.shape != ():
        raise ContractViolation(f"finite_diff_check: f must be scalar-valued, got {out.shape}")
    backward(out, [xt])
    analytic = xt.grad.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - step
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite_diff_check: non-finite value probing coordinate {i}")
            fd = (fp - fm) / (2.0 * step)
            err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


def param_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-6,
    per_param: int = 3,
    seed: int = 0,
) -> float:
    """Finite-difference check of ``loss_fn`` against in-place parameter tensors.

    Probes ``per_param`` random coordinates of every parameter.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                a = ga.reshape(-1)[i]
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
