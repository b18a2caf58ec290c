"""Reverse-mode automatic differentiation over dense numpy tensors.

The op functions below build the computation graph implicitly: every op
output remembers its parent tensors plus a closure that routes gradients to
them. Tensor creation order is already a topological order (an op's inputs
exist before its output), so ``backward`` replays closures by decreasing
node id. That fixes the accumulation order and makes gradients bit-exactly
reproducible.

Storage is 32-bit by default; every op preserves the dtype of its inputs,
which lets ``grad_check`` rerun the same graph in 64-bit.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


_ids = itertools.count()

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense float tensor with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_id")

    def __init__(self, data, requires_grad: bool = False):
        # Only explicit float64 ndarrays keep their precision (grad_check
        # uses them); everything else stores as float32.
        keep_dtype = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES or not keep_dtype:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward_fn = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            np.add(self.grad, g, out=self.grad, casting="same_kind")

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents, op: str, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op {op!r} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        # Constant subgraph: no closure, lets dead branches be collected.
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    nodes.sort(key=lambda n: n._id, reverse=True)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in nodes:
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), "div", bwd)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    data = x.data * c

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _result(data, (x,), "scale", bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _result(data, (x,), "relu", bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return _result(data, (x,), "tanh", bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * data)

    return _result(data, (x,), "exp", bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _result(data, (x,), "log", bwd)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * 0.5 / data)

    return _result(data, (x,), "sqrt", bwd)


def clip_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = as_tensor(x)
    floor = float(floor)
    data = np.maximum(x.data, floor)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > floor))

    return _result(data, (x,), "clip_min", bwd)


# ---------------------------------------------------------------------------
# shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), "matmul", bwd)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.data.shape}")
    data = x.data.T.copy()

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return _result(data, (x,), "transpose", bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _result(data, (x,), "reshape", bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tuple(tensors), "concat", bwd)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    x = as_tensor(x)
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of shape {x.data.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _result(data, (x,), "narrow", bwd)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.data.shape))

    return _result(data, (x,), "reduce_sum", bwd)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along one axis."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    soft = e / s
    data = m + np.log(s)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        if x.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(g * soft)

    return _result(data, (x,), "logsumexp", bwd)


def softmax(x, axis: int) -> Tensor:
    return exp(sub(x, logsumexp(x, axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# composite ops used throughout the models and objectives

def affine(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def l2_normalize(x, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """x / max(||x||_2, eps), norms taken along ``axis``."""
    sq = reduce_sum(mul(x, x), axis=axis, keepdims=True)
    # max(||x||, eps) == sqrt(max(||x||^2, eps^2)); clipping before the sqrt
    # keeps the derivative finite for zero rows.
    norm = sqrt(clip_min(sq, eps * eps))
    return div(x, norm)


def cosine_sim(a, b, eps: float = 1e-8) -> Tensor:
    """<a, b> / (max(||a||, eps) * max(||b||, eps)) for two 1-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_sim shape mismatch: {a.data.shape} vs {b.data.shape}")
    num = reduce_sum(mul(a, b))
    na = sqrt(clip_min(reduce_sum(mul(a, a)), eps * eps))
    nb = sqrt(clip_min(reduce_sum(mul(b, b)), eps * eps))
    return div(num, mul(na, nb))


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = sub(a, b)
    return scale(reduce_sum(mul(d, d)), 1.0 / d.data.size)


def frobenius_sq(a, b=None) -> Tensor:
    """Squared Frobenius norm of ``a`` or of ``a - b``."""
    d = as_tensor(a) if b is None else sub(a, b)
    return reduce_sum(mul(d, d))


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, inputs, h: float = 1e-3) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes one Tensor per entry of ``inputs`` and returns a scalar
    Tensor; it must be a pure function so it can be re-evaluated at probe
    points. All evaluations run in 64-bit. Returns the max over coordinates
    of |g_ad - g_fd| / max(1, |g_fd|).
    """
    if h <= 0:
        raise ValueError("grad_check requires h > 0")
    leaves = [Tensor(as_tensor(x).data.astype(np.float64), requires_grad=True) for x in inputs]

    out = f(*leaves)
    if out.data.shape != ():
        raise ShapeError(f"grad_check expects a scalar function, got shape {out.data.shape}")
    backward(out)
    ad_grads = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]

    max_rel = 0.0
    for leaf, ad in zip(leaves, ad_grads):
        flat = leaf.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(*leaves).data)
            flat[i] = orig - h
            f_minus = float(f(*leaves).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ad_flat[i] - fd) / max(1.0, abs(fd))
            if rel > max_rel:
                max_rel = rel
    return max_rel
