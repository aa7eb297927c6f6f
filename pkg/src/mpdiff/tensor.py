"""Dense tensors with a dynamic reverse-mode tape.

Storage is a numpy array (float32 by default, float64 when requested).
Every op records its parents and a closure mapping the output gradient to
parent gradients; :meth:`Tensor.backward` walks the tape once in reverse
topological order and then releases it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

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
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse mode -------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
        if self._consumed:
            raise RuntimeError("backward: graph already consumed (double backward is unsupported)")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"backward through {node._op}: gradient shape {pg.shape} "
                        f"does not match input shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._grad_fn = None
                node._consumed = True


def _raise_item(t: Tensor):
    raise ShapeError(f"item: tensor has {t.size} elements, expected 1")


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to avoid recursion limits."""
    visited: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Iterable[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype, copy=False)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype, copy=False)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _check_finite("div", ad / bd)

    def grad_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _check_finite("pow", ad**p)
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _check_finite("exp", np.exp(a.data))
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NonFiniteError("log: input must be strictly positive")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (_check_finite("sqrt backward", g * 0.5 / out),), "sqrt")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Hard clamp; gradient passes where ``lo <= a <= hi`` (boundaries inclusive)."""
    ad = a.data
    out = np.clip(ad, lo, hi)

    def grad_fn(g):
        mask = np.ones(ad.shape, dtype=bool)
        if lo is not None:
            mask &= ad >= lo
        if hi is not None:
            mask &= ad <= hi
        return (g * mask,)

    return _make(out, (a,), grad_fn, "clamp")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid_np(ad)
    return _make(ad * s, (a,), lambda g: (g * s * (1 + ad * (1 - s)),), "silu")


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def grad_fn(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[i] for i in axes]))
    if n == 0:
        raise ShapeError(f"mean: empty reduction over shape {shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    scale = 1.0 / n

    def grad_fn(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), grad_fn, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tensors, grad_fn, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B, Cin, T]`` with ``w [Cout, Cin, K]``, zero padding."""
    x, w = _pair(x, w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: invalid stride={stride} padding={padding}")
    B, cin, T = x.shape
    cout, _, K = w.shape
    tp = T + 2 * padding
    tout = (tp - K) // stride + 1
    if tout < 1:
        raise ShapeError(f"conv1d: kernel {w.shape} longer than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    if stride == 1:
        return _conv1d_taps(x, w, xp, tout, padding)
    return _conv1d_im2col(x, w, xp, stride, tout, padding)


def _conv1d_taps(x: Tensor, w: Tensor, xp: np.ndarray, tout: int, padding: int) -> Tensor:
    # one stacked GEMM over all taps, then shifted adds; avoids im2col copies
    B, cin, T = x.shape
    cout, _, K = w.shape
    ws = np.ascontiguousarray(w.data.transpose(2, 0, 1)).reshape(K * cout, cin)
    y = np.matmul(ws, xp)
    out = y[:, 0:cout, 0:tout].copy()
    for k in range(1, K):
        out += y[:, k * cout : (k + 1) * cout, k : k + tout]

    def grad_fn(g):
        dy = np.zeros((B, K * cout, xp.shape[2]), dtype=g.dtype)
        for k in range(K):
            dy[:, k * cout : (k + 1) * cout, k : k + tout] = g
        gw = None
        if w.requires_grad:
            dws = np.matmul(dy, xp.transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(dws.reshape(K, cout, cin).transpose(1, 2, 0))
        gx = None
        if x.requires_grad:
            gxp = np.matmul(ws.T, dy)
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + T]) if padding else gxp
        return gx, gw

    return _make(out, (x, w), grad_fn, "conv1d")


def _conv1d_im2col(x: Tensor, w: Tensor, xp: np.ndarray, stride: int, tout: int, padding: int) -> Tensor:
    B, cin, T = x.shape
    cout, _, K = w.shape
    tp = xp.shape[2]
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * tout, cin * K)
    wm = w.data.reshape(cout, cin * K)
    out = (cols @ wm.T).reshape(B, tout, cout).transpose(0, 2, 1)

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * tout, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(B, tout, cin, K)
            gxp = np.zeros((B, cin, tp), dtype=g.dtype)
            span = stride * (tout - 1) + 1
            for k in range(K):
                gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + T] if padding else gxp
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), grad_fn, "conv1d")


# ---------------------------------------------------------------------------
# temporal resampling (last axis)


def avg_pool1d(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    *lead, T = x.shape
    if T % factor:
        raise ShapeError(f"avg_pool1d: length {T} not divisible by {factor}")
    out = x.data.reshape(*lead, T // factor, factor).mean(axis=-1, dtype=np.float64).astype(x.dtype)
    return _make(
        out, (x,), lambda g: (np.repeat(g / factor, factor, axis=-1).astype(x.dtype),), "avg_pool1d"
    )


def upsample_nearest1d(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    *lead, T = x.shape

    def grad_fn(g):
        return (g.reshape(*lead, T, factor).sum(axis=-1, dtype=np.float64).astype(x.dtype),)

    return _make(np.repeat(x.data, factor, axis=-1), (x,), grad_fn, "upsample_nearest1d")


def linear_resample_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``[n_in, n_out]`` matrix mapping a track onto ``n_out`` points over the same span.

    Endpoints coincide (sample ``j`` sits at source position ``j*(n_in-1)/(n_out-1)``).
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"linear_resample_matrix: lengths must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_in, n_out), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[0, :] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    cols = np.arange(n_out)
    m[lo, cols] = 1.0 - frac
    m[lo + 1, cols] += frac
    return m.astype(dtype)


def nearest_resample_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"nearest_resample_matrix: lengths must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_in, n_out), dtype=dtype)
    src = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
    m[np.minimum(src, n_in - 1), np.arange(n_out)] = 1.0
    return m


def resample_linear(x: Tensor, n_out: int) -> Tensor:
    return matmul(x, Tensor(linear_resample_matrix(x.shape[-1], n_out, x.dtype)))


def resample_nearest(x: Tensor, n_out: int) -> Tensor:
    return matmul(x, Tensor(nearest_resample_matrix(x.shape[-1], n_out, x.dtype)))
