"""Minimal reverse-mode autodiff over numpy arrays.

Each primitive returns a :class:`Tensor` holding its parents and a closure
that pushes the output gradient back into them.  Graphs are only recorded
when at least one input requires a gradient and recording is enabled.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor requiring grad")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior gradients are not needed once propagated
                node.grad = None


# -- elementwise ------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(g, y.shape))

    return _make(x.data + y.data, (x, y), "add", bw)


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(-g, y.shape))

    return _make(x.data - y.data, (x, y), "sub", bw)


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g * y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g * x.data, y.shape))

    return _make(x.data * y.data, (x, y), "mul", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", bw)


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)

    def bw(g):
        _accumulate(x, g * s)

    return _make(np.abs(x.data), (x,), "abs", bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, 2.0 * g * x.data)

    return _make(x.data * x.data, (x,), "square", bw)


def hardtanh(x: Tensor) -> Tensor:
    """clip(x, -1, 1); the smooth surrogate whose slope the STE borrows."""
    mask = np.abs(x.data) <= 1.0

    def bw(g):
        _accumulate(x, g * mask)

    return _make(np.clip(x.data, -1.0, 1.0), (x,), "hardtanh", bw)


def ste_binarize(x: Tensor, signed: bool = True, threshold=0.5) -> Tensor:
    """Binarize in the forward pass, straight-through in the backward pass.

    signed: +1 where x >= 0 else -1.  Unsigned: 1 where x >= threshold else
    0 (``threshold`` may be an array broadcastable against ``x``).  The
    gradient passes unchanged where |x| <= 1 and is zero elsewhere.
    """
    from .binarize import nonneg_binarize, sign_binarize, ste_mask

    if signed:
        out = sign_binarize(x.data)
    else:
        out = nonneg_binarize(x.data, threshold)
    mask = ste_mask(x.data)

    def bw(g):
        _accumulate(x, g * mask)

    return _make(out.astype(DTYPE), (x,), "ste_sign" if signed else "ste_01", bw)


# -- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ValueError("mean over an empty axis")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(x.data.mean(axis=axes, keepdims=keepdims), (x,), "mean", bw)


meanpool = mean


def maxpool(x: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    if x.shape[axis] == 0:
        raise ValueError("max-pool over an empty axis")
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not x.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        _accumulate(x, gx)

    return _make(out, (x,), "maxpool", bw)


def max_all(x: Tensor) -> Tensor:
    return maxpool(reshape(x, (-1,)), axis=0)


# -- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), "transpose", bw)


def concat(xs: Iterable[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat of no tensors")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, "concat", bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: x (B, N, C), idx (B, ...) -> (B, ..., C)."""
    B, N, C = x.shape
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).ravel()
    out = x.data.reshape(B * N, C)[flat].reshape(*idx.shape, C)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros((B * N, C), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, C))
        _accumulate(x, gx.reshape(B, N, C))

    return _make(out, (x,), "gather", bw)


def take(x: Tensor, idx) -> Tensor:
    """x[idx] along the leading axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(x.data[idx], (x,), "take", bw)


# -- linear algebra ----------------------------------------------------------


def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        if x.requires_grad:
            gx = g @ np.swapaxes(y.data, -1, -2) if y.ndim > 1 else np.multiply.outer(g, y.data)
            _accumulate(x, _unbroadcast(gx, x.shape))
        if y.requires_grad:
            gy = np.swapaxes(x.data, -1, -2) @ g
            _accumulate(y, _unbroadcast(gy, y.shape))

    return _make(x.data @ y.data, (x, y), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., in) @ w(out, in).T + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-dim {w.shape[1]}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(w, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, "linear", bw)


# -- normalisation / activations ------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), "log_softmax", bw)


def l1_normalize(x: Tensor, axis: int, eps: float = 1e-9) -> Tensor:
    """x / (eps + sum(x, axis)) for non-negative x."""
    s = eps + x.data.sum(axis=axis, keepdims=True)
    y = x.data / s

    def bw(g):
        _accumulate(x, (g - (g * y).sum(axis=axis, keepdims=True)) / s)

    return _make(y, (x,), "l1_normalize", bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    y = x.data / n

    def bw(g):
        _accumulate(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / n)

    return _make(y, (x,), "l2_normalize", bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over every axis but the last (channels-last layout).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = (
                    inv
                    / n
                    * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
                )
            else:
                gx = gxhat * inv
            _accumulate(x, gx)

    return _make(out, (x, gamma, beta), "batchnorm", bw)
