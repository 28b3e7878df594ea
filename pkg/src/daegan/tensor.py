"""Dense tensor with tape-based reverse-mode autodiff.

Every differentiable op records a node (parents + backward rule) on the
result. :func:`backward` rebuilds the recorded :class:`Graph` reachable from
a scalar loss and replays the rules in exact reverse recording order.
Only first-order derivatives are supported.
"""
import contextlib
import itertools
import os

import numpy as np

_counter = itertools.count()
_state = {
    "dtype": np.float32,
    "grad_enabled": True,
    "debug": os.environ.get("DAEGAN_DEBUG", "0") not in ("", "0"),
}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag):
    """Enable finiteness checks on every op output."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64) and isinstance(data, np.ndarray):
        return arr
    return arr.astype(_state["dtype"])


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name",
                 "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self.name = name

    # -- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- arithmetic
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_node(data, parents, backward):
    """Create an op output; record ``backward(grad) -> parent grads`` if tracking."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by " + getattr(
            backward, "__qualname__", "op").split(".")[0])
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- graph

class Graph:
    """Operations reachable from an output, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes = sorted(seen.values(), key=lambda t: t._id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [t for t in self.nodes if t._backward is None]


def backward(loss, graph=None, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    ``params`` (optional) are leaves that must end up with a gradient even
    if the loss does not reach them; those get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    if graph is None:
        graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True).reshape(node.shape)
            else:
                node.grad = node.grad + g
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b, a)
    sa, sb = a.shape, b.shape

    def _add_bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), _add_bw)


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    a = _wrap(a, b)
    sa, sb = a.shape, b.shape

    def _sub_bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), _sub_bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b, a)
    ad, bd = a.data, b.data

    def _mul_bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_node(ad * bd, (a, b), _mul_bw)


def div(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    a = _wrap(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def _div_bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_node(out, (a, b), _div_bw)


def power(a, p):
    ad = a.data

    def _pow_bw(g):
        return (g * p * ad ** (p - 1),)

    return make_node(ad ** p, (a,), _pow_bw)


def tabs(a):
    ad = a.data

    def _abs_bw(g):
        return (g * np.sign(ad),)

    return make_node(np.abs(ad), (a,), _abs_bw)


def exp(a):
    out = np.exp(a.data)

    def _exp_bw(g):
        return (g * out,)

    return make_node(out, (a,), _exp_bw)


def log(a):
    ad = a.data

    def _log_bw(g):
        return (g / ad,)

    return make_node(np.log(ad), (a,), _log_bw)


def sqrt(a):
    out = np.sqrt(a.data)

    def _sqrt_bw(g):
        return (g * 0.5 / out,)

    return make_node(out, (a,), _sqrt_bw)


# ---------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def _sum_bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _sum_bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------------- shapes

def reshape(a, shape):
    old = a.shape

    def _reshape_bw(g):
        return (g.reshape(old),)

    return make_node(a.data.reshape(shape), (a,), _reshape_bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def _transpose_bw(g):
        return (g.transpose(inv),)

    return make_node(a.data.transpose(axes), (a,), _transpose_bw)


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def _getitem_bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), _getitem_bw)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _concat_bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                     _concat_bw)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def matmul(a, b):
    ad, bd = a.data, b.data

    def _matmul_bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_node(ad @ bd, (a, b), _matmul_bw)


# ---------------------------------------------------------- activations

def relu(x):
    mask = x.data > 0

    def _relu_bw(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), _relu_bw)


def leaky_relu(x, alpha=0.2):
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)

    def _leaky_relu_bw(g):
        return (g * slope,)

    return make_node(x.data * slope, (x,), _leaky_relu_bw)


def tanh(x):
    out = np.tanh(x.data)

    def _tanh_bw(g):
        return (g * (1 - out * out),)

    return make_node(out, (x,), _tanh_bw)


def sigmoid(x):
    out = 0.5 * (1 + np.tanh(0.5 * x.data))

    def _sigmoid_bw(g):
        return (g * out * (1 - out),)

    return make_node(out, (x,), _sigmoid_bw)


def softplus(x):
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype)

    def _softplus_bw(g):
        return (g * 0.5 * (1 + np.tanh(0.5 * xd)),)

    return make_node(out, (x,), _softplus_bw)


def activation(x, kind, alpha=0.2):
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _softmax_bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), _softmax_bw)
