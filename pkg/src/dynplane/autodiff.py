"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the operations the occupancy pipeline needs are provided. Every op
records its parents and a backward closure on the output tensor; calling
``Tensor.backward`` on a scalar walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default float precision ("float32" or "float64")."""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """n-dimensional array that records how it was computed.

    ``data`` is a numpy array in the current default precision. Leaves created
    with ``requires_grad=True`` accumulate gradients into ``grad`` on every
    backward pass until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward -----------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out.astype(x.dtype), (a,), lambda g: (g * _stable_sigmoid(x),))


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a: Tensor, exponent: int) -> Tensor:
    x = a.data
    out = x**exponent

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return _result(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sin": sin,
    "cos": cos,
    "sigmoid": sigmoid,
}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python float as ``b``."""
    if op_kind == "scale":
        return scale(a, float(b))
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max reduction along one axis; ties route gradient to the first index."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), backward)


def _segment_matrix(index: np.ndarray, num_rows: int, weights=None, dtype=np.float64):
    """Sparse (num_rows x len(index)) matrix with a 1 (or weight) at (index[i], i)."""
    n = index.shape[0]
    vals = np.ones(n, dtype=dtype) if weights is None else weights
    return sp.csr_matrix((vals, (index, np.arange(n))), shape=(num_rows, n))


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; backward sums gradients of repeated rows."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        flat = g.reshape(len(index), -1)
        summed = _segment_matrix(index, a.shape[0], dtype=g.dtype) @ flat
        return (np.asarray(summed, dtype=g.dtype).reshape(a.shape),)

    return _result(a.data[index], (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias) for 2-D x; a fused form of matmul + add."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d output size is not integral: (size {n} + 2*{padding} - {k}) / stride {stride}"
        )
    return span // stride + 1


def _im2col_nhwc(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last patches: B x Ho x Wo x (k*k*C), offsets major, channels minor."""
    slices = [
        xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] for i in range(k) for j in range(k)
    ]
    return slices[0] if k == 1 else np.concatenate(slices, axis=-1)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is C_in x H x W or batched B x C_in x H x W; ``kernel`` is
    C_out x C_in x k x k with odd k. ``bias`` (optional) has shape C_out.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (B,)C,H,W input and 4-D kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = xd.shape
    cout, kcin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xt = xd.transpose(0, 2, 3, 1)
    if padding:
        xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # kernel as (k*k*C_in) x C_out, matching the patch layout
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    cols = _im2col_nhwc(xt, k, stride, ho, wo).reshape(-1, k * k * cin)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out = out[0] if squeeze else out

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = None
        if kernel.requires_grad:
            dk = (cols.T @ gm).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat.T).reshape(b, ho, wo, k * k, cin)
            if k == 1 and stride == 1:
                dxt = dcols[:, :, :, 0, :]
            else:
                dxt = np.zeros_like(xt)
                for n in range(k * k):
                    i, j = divmod(n, k)
                    dxt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, n, :]
                if padding:
                    dxt = dxt[:, padding:-padding, padding:-padding, :]
            dx = dxt.transpose(0, 3, 1, 2)
            dx = dx[0] if squeeze else dx
        grads = [dx, dk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)


def _pool_windows(xd: np.ndarray, window: int) -> np.ndarray:
    b, c, h, w = xd.shape
    if h % window or w % window:
        raise ShapeError(f"pool window {window} does not divide spatial size {h}x{w}")
    v = xd.reshape(b, c, h // window, window, w // window, window)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // window, w // window, window * window)


def _unpool_windows(v: np.ndarray, window: int) -> np.ndarray:
    b, c, ho, wo, _ = v.shape
    v = v.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(b, c, ho * window, wo * window)


def pool2d(kind: str, x: Tensor, window: int) -> Tensor:
    """Non-overlapping max or average pooling over ``window`` x ``window`` blocks."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    v = _pool_windows(xd, window)
    if kind == "max":
        idx = np.argmax(v, axis=-1)
        out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            g4 = g[None] if squeeze else g
            gv = np.zeros_like(v)
            np.put_along_axis(gv, idx[..., None], g4[..., None], axis=-1)
            dx = _unpool_windows(gv, window)
            return (dx[0] if squeeze else dx,)

    elif kind == "avg":
        out = v.mean(axis=-1)

        def backward(g):
            g4 = g[None] if squeeze else g
            gv = np.repeat(g4[..., None] / (window * window), window * window, axis=-1)
            dx = _unpool_windows(gv, window)
            return (dx[0] if squeeze else dx,)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    out = out[0] if squeeze else out
    return _result(np.ascontiguousarray(out), (x,), backward)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    return pool2d("max", x, window)


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    return pool2d("avg", x, window)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# point <-> grid transfer
# ---------------------------------------------------------------------------
def scatter_max(features: Tensor, cell_index: np.ndarray, num_cells: int) -> Tensor:
    """Per-cell, per-channel maximum of point features.

    Empty cells are 0. The gradient of each (cell, channel) goes to the
    contributing point with the lowest index among ties.
    """
    cell_index = np.asarray(cell_index, dtype=np.int64)
    n, d = features.shape
    if cell_index.shape != (n,):
        raise ShapeError(f"cell_index must have shape ({n},), got {cell_index.shape}")
    if n and (cell_index.min() < 0 or cell_index.max() >= num_cells):
        raise IndexError(
            f"scatter_max cell index out of range [0, {num_cells}): "
            f"min {cell_index.min()}, max {cell_index.max()}"
        )
    out = np.zeros((num_cells, d), dtype=features.data.dtype)
    if n == 0:
        return _result(out, (features,), lambda g: (np.zeros_like(features.data),))
    order = np.argsort(cell_index, kind="stable")
    sorted_cells = cell_index[order]
    sorted_feats = features.data[order]
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    cells = sorted_cells[starts]
    cmax = np.maximum.reduceat(sorted_feats, starts, axis=0)
    out[cells] = cmax

    def backward(g):
        counts = np.diff(np.r_[starts, n])
        seg = np.repeat(np.arange(len(starts)), counts)
        candidates = np.where(sorted_feats == cmax[seg], order[:, None], n)
        winner = np.minimum.reduceat(candidates, starts, axis=0)
        grad = np.zeros_like(features.data)
        grad[winner, np.arange(d)[None, :]] = g[cells]
        return (grad,)

    return _result(out, (features,), backward)


def _bilinear_weights(uv: np.ndarray, h: int, w: int):
    uv = np.clip(uv, 0.0, 1.0)
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = (np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1))
    ys = (np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1))
    corners = []
    for yi, wy in ((ys[0], 1 - fy), (ys[1], fy)):
        for xi, wx in ((xs[0], 1 - fx), (xs[1], fx)):
            corners.append((yi * w + xi, wy * wx))
    return corners


def gather_bilinear(grid: Tensor, uv: np.ndarray, grid_index: Optional[np.ndarray] = None) -> Tensor:
    """Bilinearly sample ``grid`` at normalized coordinates ``uv`` in [0, 1]^2.

    ``grid`` is D x H x W, or G x D x H x W together with a per-query
    ``grid_index``. ``uv[:, 0]`` runs along W (columns) and ``uv[:, 1]``
    along H (rows); cell (r, c) has its center at ((c + 0.5)/W, (r + 0.5)/H).
    Coordinates are clamped, and the border cells extend to the boundary.
    Only the grid receives gradients; ``uv`` is treated as a constant.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if grid.ndim == 3:
        gd = grid.data[None]
        gidx = np.zeros(len(uv), dtype=np.int64)
    else:
        gd = grid.data
        if grid_index is None:
            raise ShapeError("batched gather_bilinear needs grid_index")
        gidx = np.asarray(grid_index, dtype=np.int64)
    g_count, d, h, w = gd.shape
    q = uv.shape[0]
    flat = gd.transpose(0, 2, 3, 1).reshape(g_count * h * w, d)
    rows, vals = [], []
    for cell, weight in _bilinear_weights(uv, h, w):
        rows.append(gidx * (h * w) + cell)
        vals.append(weight)
    rows = np.concatenate(rows)
    cols = np.tile(np.arange(q), 4)
    vals = np.concatenate(vals).astype(flat.dtype)
    # query x cell interpolation matrix; duplicate entries (clamped borders) sum
    interp = sp.csr_matrix((vals, (cols, rows)), shape=(q, g_count * h * w))
    out = np.asarray(interp @ flat, dtype=flat.dtype)

    def backward(g):
        dflat = np.asarray(interp.T @ g, dtype=flat.dtype)
        dgrid = dflat.reshape(g_count, h, w, d).transpose(0, 3, 1, 2)
        return (np.ascontiguousarray(dgrid[0] if grid.ndim == 3 else dgrid),)

    return _result(out, (grid,), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    entries_checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` is re-evaluated after each perturbation of an input entry, so it
    must read the inputs' ``data`` arrays afresh. Use float64 precision.
    ``max_entries`` limits the number of probed entries per input (chosen at
    random with ``seed``).
    """
    if any(t.data.dtype != np.float64 for t in inputs):
        logger.warning("grad_check on non-float64 inputs; expect large finite-difference error")
    for t in inputs:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(entries))
        for n, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            num[n] = (plus - minus) / (2 * step)
        err = relative_error(ga.reshape(-1)[entries], num, floor)
        per_input.append(float(err.max()) if err.size else 0.0)
        checked += len(entries)
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(max(per_input, default=0.0), tolerance, per_input, checked)
