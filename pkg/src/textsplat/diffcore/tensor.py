"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (f32 or f64) and record the operations that
produced them. backward() walks the recorded graph once, accumulating
gradients into every reachable tensor that has requires_grad set. The op
set is deliberately small: exactly what the generator, decoder and
renderer need, plus the shape plumbing to compose them.

Kernels are plain vectorized numpy; single-threaded execution gives
bit-identical results across runs.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphConsumedError(RuntimeError):
    """Raised when backward() is invoked on an already-consumed graph."""


class Tensor:
    """A dense n-dimensional array node in the differentiation graph.

    data          numpy array, float32 or float64, row-major
    grad          numpy array of identical shape, or None
    requires_grad whether backward() should deposit a gradient here
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free view of the same values (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    """Build an op-output tensor; the backward closure is kept only if needed."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def from_op(data, parents, backward) -> Tensor:
    """Public hook for modules that define their own differentiable ops.

    `backward(grad_out) -> tuple of parent gradients (None allowed)`,
    aligned positionally with `parents`.
    """
    return _make(data, parents, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def powc(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a constant scalar exponent."""
    e = float(exponent)
    out = a.data**e

    def backward(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_stable(x)
    out = x * s

    def backward(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _make(out, (a,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: silu(x) = x * sigmoid(x), or sigmoid."""
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}; expected 'silu' or 'sigmoid'")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the interval, zero outside."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (a,), backward)


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask else b. The mask is a constant (no gradient)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- reductions -------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product a[..,m,k] @ b[..,k,n] with broadcast batch dims."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- shape plumbing -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows by integer index; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, indices, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), backward)


# -- neural-net kernels --------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-stabilized."""
    shift = x.data.max(axis=-1, keepdims=True)  # constant shift: gradient-transparent
    z = exp(sub(x, Tensor(shift)))
    return div(z, sum_(z, axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta_b: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta_b.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta_b.shape} do not match feature width {x.shape[-1]}")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = powc(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    return add(mul(mul(xc, inv), gamma), beta_b)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding cross-correlation: (C_in,H,W) -> (C_out,H,W)."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d_3x3 input must be (C,H,W), got {x.shape}")
    c_in, h, wd = x.shape
    if w.shape[1] != c_in or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3 kernel {w.shape} does not match input channels {c_in}")
    c_out = w.shape[0]
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d_3x3 bias {b.shape} does not match output channels {c_out}")

    xpad = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    view = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(1, 2))  # (C_in,H,W,3,3)
    out = np.einsum("cijuv,ocuv->oij", view, w.data, optimize=True) + b.data[:, None, None]

    def backward(g):
        gb = g.sum(axis=(1, 2))
        gw = np.einsum("cijuv,oij->ocuv", view, g, optimize=True)
        gx_pad = np.zeros_like(xpad)
        for u in range(3):
            for v in range(3):
                gx_pad[:, u : u + h, v : v + wd] += np.einsum("oij,oc->cij", g, w.data[:, :, u, v], optimize=True)
        return gx_pad[:, 1 : 1 + h, 1 : 1 + wd], gw, gb

    return _make(out.astype(x.dtype, copy=False), (x, w, b), backward)


def grid_sample_bilinear(plane: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling of a (C,H,W) plane at (M,2) normalized coords.

    coords[:,0] maps to width (x) and coords[:,1] to height (y), both in
    [-1,1] with align-corners semantics; out-of-range coords clamp to the
    border (clamped coordinates get zero coordinate-gradient).
    Differentiable w.r.t. the plane and the coordinates.
    """
    c, h, w = plane.shape
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"grid_sample coords must be (M,2), got {coords.shape}")
    u = coords.data[:, 0]
    v = coords.data[:, 1]
    in_u = (u >= -1.0) & (u <= 1.0)
    in_v = (v >= -1.0) & (v <= 1.0)
    uc = np.clip(u, -1.0, 1.0)
    vc = np.clip(v, -1.0, 1.0)
    x = (uc + 1.0) * 0.5 * (w - 1)
    y = (vc + 1.0) * 0.5 * (h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    p = plane.data.reshape(c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    p00 = p[:, i00].T  # (M,C)
    p01 = p[:, i01].T
    p10 = p[:, i10].T
    p11 = p[:, i11].T
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    out = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11

    def backward(g):
        gp = np.zeros((c, h * w), dtype=plane.dtype)
        rows = np.arange(c)[:, None]
        np.add.at(gp, (rows, i00[None, :]), (g * w00).T)
        np.add.at(gp, (rows, i01[None, :]), (g * w01).T)
        np.add.at(gp, (rows, i10[None, :]), (g * w10).T)
        np.add.at(gp, (rows, i11[None, :]), (g * w11).T)

        dfx = ((1 - fy)[:, None] * (p01 - p00) + fy[:, None] * (p11 - p10))
        dfy = ((1 - fx)[:, None] * (p10 - p00) + fx[:, None] * (p11 - p01))
        gu = (g * dfx).sum(axis=1) * (0.5 * (w - 1)) * in_u
        gv = (g * dfy).sum(axis=1) * (0.5 * (h - 1)) * in_v
        return gp.reshape(c, h, w), np.stack([gu, gv], axis=1).astype(coords.dtype, copy=False)

    return _make(out.astype(plane.dtype, copy=False), (plane, coords), backward)


def upsample2x_bilinear(x: Tensor) -> Tensor:
    """Double both spatial extents of (C,H,W), align_corners=False semantics."""
    c, h, w = x.shape

    def src_index(n_out, n_in):
        s = (np.arange(n_out) + 0.5) / 2.0 - 0.5
        s = np.clip(s, 0.0, n_in - 1.0)
        i0 = np.clip(np.floor(s).astype(np.int64), 0, max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = s - i0
        return i0, i1, frac

    r0, r1, fr = src_index(2 * h, h)
    c0, c1, fc = src_index(2 * w, w)
    wr = fr[:, None]
    wc = fc[None, :]
    a = x.data[:, r0][:, :, c0]
    bq = x.data[:, r0][:, :, c1]
    cq = x.data[:, r1][:, :, c0]
    d = x.data[:, r1][:, :, c1]
    out = (1 - wr) * (1 - wc) * a + (1 - wr) * wc * bq + wr * (1 - wc) * cq + wr * wc * d

    def backward(g):
        gx = np.zeros((c, h * w), dtype=x.dtype)
        rows = np.arange(c)[:, None, None]
        for ri, wrow in ((r0, 1 - fr), (r1, fr)):
            for ci, wcol in ((c0, 1 - fc), (c1, fc)):
                idx = (ri[:, None] * w + ci[None, :])[None, :, :]
                np.add.at(gx, (rows, idx), g * (wrow[:, None] * wcol[None, :]))
        return (gx.reshape(c, h, w),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward)


# -- backward pass --------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the op graph reachable from root."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad t.

    The graph is consumable exactly once: a second backward through any of
    its nodes raises GraphConsumedError until a fresh forward pass rebuilds
    them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward() already consumed this graph; run a new forward pass")

    order = _topo_order(loss)
    for node in order:
        if node._consumed and node._backward is None and node._parents:
            raise GraphConsumedError("graph shares nodes with an already-consumed backward pass")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        node._backward = None
        node._consumed = True
    loss._consumed = True
