"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Traced operations record their parent
tensors plus a closure that maps the output gradient to parent gradients;
``backward`` replays the tape once in reverse topological order. Graphs are
rebuilt on every forward pass, so there is no retain/free bookkeeping.

float32 is the training precision. The finite-difference gradient checks run
everything in float64; an operation's output dtype follows NumPy promotion
of its inputs, so the same code serves both modes.
"""
from __future__ import annotations

import contextlib

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_TRACE = True

# When set to a list, piecewise operations append their active-region
# signature (ReLU sign masks, |x| sign bits, bilinear floor cells) to it.
# Finite-difference checks use this to reject probes that straddle a kink,
# where a central difference estimates neither one-sided slope.
_REGION_TRACE = None


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _TRACE
    prev = _TRACE
    _TRACE = False
    try:
        yield
    finally:
        _TRACE = prev


@contextlib.contextmanager
def record_regions(sink):
    """Collect piecewise-region signatures of every traced op into ``sink``."""
    global _REGION_TRACE
    prev = _REGION_TRACE
    _REGION_TRACE = sink
    try:
        yield sink
    finally:
        _REGION_TRACE = prev


def _trace_region(arr):
    if _REGION_TRACE is not None:
        _REGION_TRACE.append(arr)


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------

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

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ValueError(f"expected a single-element tensor, got shape {self.shape}")

    def detach(self):
        out = Tensor(self.data)
        return out

    def astype(self, dtype):
        """Detached copy in another float dtype (not part of the graph)."""
        return Tensor(self.data.astype(dtype))

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Gradients add up across repeated calls until cleared with
        ``zero_grad``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor detached from the graph")
        order = _toposort(self)
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flows.get(id(parent))
                flows[id(parent)] = pg if prev is None else prev + pg

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_np(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # ------------------------------------------------------------------
    # shape manipulation / reductions as methods
    # ------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)


# ----------------------------------------------------------------------
# graph plumbing
# ----------------------------------------------------------------------


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order  # producers before consumers


def _traced(data, parents, backward):
    out = Tensor(data)
    if _TRACE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _np(x):
    return np.asarray(x)


def _const(x, dtype):
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=None):
    """Coerce arrays/scalars to a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Coerce a binary op's operands, matching the tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, _const(b, a.dtype)
    if isinstance(b, Tensor):
        return _const(a, b.dtype), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after NumPy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise operations
# ----------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _traced(data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _traced(data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    data = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return (ga, gb)

    return _traced(data, (a, b), bw)


def power(a, n):
    if isinstance(n, Tensor):
        raise TypeError("only scalar exponents are supported")
    n = float(n)
    data = a.data**n

    def bw(g):
        return (g * n * a.data ** (n - 1.0),)

    return _traced(data, (a,), bw)


def exp(a):
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _traced(data, (a,), bw)


def log(a):
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _traced(data, (a,), bw)


def sqrt(a):
    data = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / data),)

    return _traced(data, (a,), bw)


def absolute(a):
    data = np.abs(a.data)
    _trace_region(a.data > 0)

    def bw(g):
        return (g * np.sign(a.data),)

    return _traced(data, (a,), bw)


def relu(a):
    data = np.maximum(a.data, 0.0)
    _trace_region(a.data > 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _traced(data, (a,), bw)


def sigmoid(a):
    x = a.data
    z = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def bw(g):
        return (g * data * (1.0 - data),)

    return _traced(data, (a,), bw)


def softplus(a):
    x = a.data
    zero = x.dtype.type(0)
    data = np.logaddexp(zero, x)

    def bw(g):
        z = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * sig,)

    return _traced(data, (a,), bw)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is None:
            return (np.broadcast_to(g, a.shape),)
        g2 = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(g2, a.shape),)

    return _traced(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    data = a.data.mean(axis=axes, keepdims=keepdims)
    if axes is None:
        count = a.data.size
    else:
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    inv = 1.0 / count

    def bw(g):
        if axes is None:
            return (np.broadcast_to(g * inv, a.shape),)
        g2 = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(g2 * inv, a.shape),)

    return _traced(data, (a,), bw)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _traced(data, (a,), bw)


def permute(a, axes):
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _traced(data, (a,), bw)


def broadcast_to(a, shape):
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _traced(data, (a,), bw)


def take(a, key):
    """Basic (slice/int/Ellipsis) indexing; advanced indexing is rejected."""
    _check_basic_key(key)
    data = a.data[key]

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _traced(data, (a,), bw)


def _check_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis and p is not None:
            raise TypeError(f"only basic indexing is differentiable, got {type(p).__name__}")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        grads = []
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            grads.append(g[tuple(sl)] if t.requires_grad else None)
            start += n
        return tuple(grads)

    return _traced(data, tuple(tensors), bw)


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    data = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _traced(data, (a, b), bw)
