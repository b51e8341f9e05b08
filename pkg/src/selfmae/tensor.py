"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (``float32`` or ``float64``).
Every differentiable op records its parents and a backward closure on the
output tensor; :func:`backward` walks the recorded nodes in reverse creation
order, so each node's gradient is complete before its own rule runs.

Only the op set needed by the ViT / MAE / UNETR stack is provided.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
NORM_EPS = 1e-6

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class GraphFreedError(RuntimeError):
    pass


def _freed(_g):
    raise GraphFreedError(
        "backward through a graph that has already been freed; "
        "pass retain_graph=True to the first backward call"
    )


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and np.issubdtype(arr.dtype, np.number):
                arr = arr.astype(np.float32)
            else:
                raise DTypeError(f"unsupported tensor dtype {arr.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self.op = "leaf"
        self._retain = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._id = next(_counter)
        t.op = "leaf"
        t._retain = False
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient on this (non-leaf) tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        return transpose(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _check_dtypes(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise DTypeError(f"dtype mismatch: {d} vs {t.dtype}")


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create an op output; ``backward_fn(g)`` returns one gradient (or None) per parent.

    Public so that fused ops elsewhere in the package can register themselves.
    """
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, 1.0 / b)
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


# -- linear algebra / layout -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is stored ``[in, out]``."""
    _check_dtypes(x, w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, bw, "linear")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of the axes of {x.shape}")
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(x: Tensor, a: int = -2, b: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*xs)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(out, tuple(xs), bw, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(out, (x,), bw, "getitem")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather entries ``indices`` along ``axis`` (same indices for every leading slice)."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise IndexError(f"take: index out of range for axis {axis} of extent {x.shape[axis]}")
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        idx = (slice(None),) * axis + (indices,)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Per-sample row gather: ``x[b, indices[b], :]`` for ``x`` of shape ``[B, N, D]``."""
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim != 3 or indices.ndim != 2 or indices.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} and indices {indices.shape} are incompatible")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[1]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[1]} rows")
    out = np.take_along_axis(x.data, indices[:, :, None], axis=1)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        b = np.arange(src_shape[0])[:, None]
        np.add.at(gx, (b, indices), g)
        return (gx,)

    return make_node(out, (x,), bw, "gather_rows")


# -- reductions -------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / n)


# -- unary nonlinearities ----------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1 / (1 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1 + np.exp(-np.abs(xd))))
    out = out.astype(xd.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


_INV_SQRT2 = 1 / math.sqrt(2.0)
_INV_SQRT2PI = 1 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_node(out, (x,), bw, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


# -- normalisation -----------------------------------------------------------------


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Normalise over the last axis (population variance) then apply ``weight``/``bias``."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        if weight.shape != (d,):
            raise ShapeError(f"layer_norm: weight {weight.shape} does not match features {d}")
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    wd = weight.data if weight is not None else None

    def bw(g):
        gx_hat = g * wd if wd is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(xd.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_node(out, parents, bw, "layer_norm")


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalisation over spatial axes of ``[B, C, *spatial]``."""
    xd = x.data
    c = xd.shape[1]
    axes = tuple(range(2, xd.ndim))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    wd = weight.data.reshape(bshape) if weight is not None else None

    def bw(g):
        gx_hat = g * wd if wd is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=axes, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        grads = [gx]
        red = (0,) + axes
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_node(out, parents, bw, "instance_norm")


# -- stochastic regularisers (masks are drawn by the caller) ----------------------------


def dropout_apply(x: Tensor, keep_mask: np.ndarray, p: float) -> Tensor:
    m = (np.asarray(keep_mask, dtype=x.dtype) / x.dtype.type(1.0 - p)).astype(x.dtype)
    return make_node(x.data * m, (x,), lambda g: (g * m,), "dropout")


def droppath_apply(x: Tensor, keep: np.ndarray, p: float) -> Tensor:
    """Zero whole samples (leading axis) where ``keep`` is False; rescale survivors."""
    keep = np.asarray(keep)
    if keep.shape != (x.shape[0],):
        raise ShapeError(f"droppath: keep mask {keep.shape} does not match batch {x.shape[0]}")
    m = (keep.astype(x.dtype) / x.dtype.type(1.0 - p)).reshape((-1,) + (1,) * (x.ndim - 1))
    return make_node(x.data * m, (x,), lambda g: (g * m,), "droppath")


# -- 3D convolutions -----------------------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(v)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B,C,D,H,W]`` with ``w [O,C,k,k,k]``."""
    _check_dtypes(x, w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
    xd, wd = x.data, w.data
    B, C = xd.shape[:2]
    O, _, kd, kh, kw = wd.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    Do, Ho, Wo = win.shape[2:5]
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"conv3d: kernel {wd.shape[2:]} larger than padded input {xp.shape[2:]}")
    # im2col: [B*Do*Ho*Wo, C*k^3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(B * Do * Ho * Wo, -1)
    wmat = wd.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Do, Ho, Wo, O).transpose(0, 4, 1, 2, 3))
    xp_shape = xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Do, Ho, Wo, C, kd, kh, kw)
            gxp = np.zeros(xp_shape, dtype=xd.dtype)
            s = stride
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i : i + s * Do : s, j : j + s * Ho : s, k : k + s * Wo : s] += gcols[
                            :, :, :, :, :, i, j, k
                        ].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p, p : xp_shape[4] - p] if p else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, ``w [C_in, C_out, k, k, k]``; output extent ``(n-1)*stride + k``."""
    _check_dtypes(x, w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    B, C, D, H, W = xd.shape
    _, O, kd, kh, kw = wd.shape
    s = stride
    oshape = (B, O, (D - 1) * s + kd, (H - 1) * s + kh, (W - 1) * s + kw)
    xr = xd.transpose(0, 2, 3, 4, 1).reshape(-1, C)
    # [B*D*H*W, O*k^3]
    contrib = (xr @ wd.reshape(C, -1)).reshape(B, D, H, W, O, kd, kh, kw)
    out = np.zeros(oshape, dtype=xd.dtype)
    if kd == kh == kw == s:
        out[:] = contrib.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(oshape)
    else:
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    out[:, :, i : i + s * D : s, j : j + s * H : s, k : k + s * W : s] += contrib[
                        ..., i, j, k
                    ].transpose(0, 4, 1, 2, 3)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1, 1)

    def bw(g):
        if kd == kh == kw == s:
            gc = g.reshape(B, O, D, kd, H, kh, W, kw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        else:
            gc = np.empty((B, D, H, W, O, kd, kh, kw), dtype=g.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gc[..., i, j, k] = g[:, :, i : i + s * D : s, j : j + s * H : s, k : k + s * W : s].transpose(
                            0, 2, 3, 4, 1
                        )
        gc = gc.reshape(B * D * H * W, -1)
        gx = (gc @ wd.reshape(C, -1).T).reshape(B, D, H, W, C).transpose(0, 4, 1, 2, 3) if x.requires_grad else None
        gw = (xr.T @ gc).reshape(wd.shape) if w.requires_grad else None
        if b is not None:
            gb = g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None
            return gx, gw, gb
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, bw, "conv_transpose3d")


# -- backward -------------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every reachable leaf with ``requires_grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    nodes = _topo(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op} backward produced {pg.shape} for parent {parent.shape}")
            pg = pg.astype(parent.dtype, copy=False)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    if not retain_graph:
        for node in nodes:
            if node._backward is not None:
                node._backward = _freed


# -- gradient checking --------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    tol: float
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:g} checked={self.checked}"


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor] | dict[str, Tensor],
    step: float | None = None,
    tol: float | None = None,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``x`` is a tensor (``f`` is called as ``f(x)``) or a collection of tensors
    that ``f()`` closes over.  Relative error is ``|a - n| / max(1, |a|, |n|)``.
    With ``max_checks`` only that many randomly chosen coordinates per tensor are
    perturbed.
    """
    single = isinstance(x, Tensor)
    if single:
        named = {"x": x}
        call = lambda: f(x)  # noqa: E731
    else:
        named = dict(x) if isinstance(x, dict) else {str(i): t for i, t in enumerate(x)}
        call = f
    dtype = next(iter(named.values())).dtype
    if step is None:
        step = 1e-4 if dtype == np.float64 else 1e-2
    if tol is None:
        tol = 1e-6 if dtype == np.float64 else 1e-3
    rng = rng or np.random.default_rng(0)

    for t in named.values():
        t.grad = None
        t.requires_grad = True
    out = call()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}

    worst, checked, failures = 0.0, 0, []
    with no_grad():
        for name, t in named.items():
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(call().data.reshape(-1)[0])
                flat[i] = orig - step
                fm = float(call().data.reshape(-1)[0])
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                ana = float(analytic[name].reshape(-1)[i])
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                checked += 1
                worst = max(worst, err)
                if not err <= tol:
                    failures.append((name, np.unravel_index(i, t.shape), ana, num))
    for t in named.values():
        t.grad = None
    return GradCheckReport(passed=not failures, max_rel_error=worst, checked=checked, tol=tol, failures=failures)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def check_finite(t: Tensor, where: str = "") -> Tensor:
    """Debug check: raise if ``t`` holds NaN or inf."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {where or t.op} output")
    return t


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale, "matmul": matmul,
    "linear": linear, "reshape": reshape, "permute": permute, "transpose": transpose,
    "concat": concat, "getitem": getitem, "take": take, "gather_rows": gather_rows,
    "sum": sum_, "mean": mean, "softmax": softmax, "log_softmax": log_softmax,
    "layer_norm": layer_norm, "gelu": gelu, "relu": relu, "sigmoid": sigmoid,
    "exp": exp, "log": log, "sqrt": sqrt, "square": square, "conv3d": conv3d,
    "conv_transpose3d": conv_transpose3d, "instance_norm": instance_norm,
    "dropout": dropout_apply, "droppath": droppath_apply,
}  # fmt: skip
