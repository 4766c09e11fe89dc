"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  Node ids come from a global counter, so sorting the reachable nodes
by id recovers the order in which they were recorded.  A :class:`Tape` built
from a scalar output replays that order backwards.

:func:`stop_gradient` is the truncation primitive: an identity in the forward
pass whose output is a fresh constant.  Inside ``gradient_truncation(False)``
it degrades to a plain identity so the same graph can be compared against
finite differences.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "make_node",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv2d",
    "stop_gradient",
    "gradient_truncation",
    "no_grad",
    "truncation_enabled",
    "relu",
    "square",
    "rsqrt",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "backward",
]

_node_ids = itertools.count()
_truncate = contextvars.ContextVar("ncmn_truncate", default=True)
_recording = contextvars.ContextVar("ncmn_recording", default=True)


class Tensor:
    """A float64 array plus an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = ()
        self._backward = None

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
    def values(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn):
    """Record an operation.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.  The
    node is only linked into the graph when some parent requires grad.
    """
    out = Tensor(data)
    if _recording.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """The recorded operations reachable from ``output``, in record order."""

    def __init__(self, output):
        if not isinstance(output, Tensor):
            raise ContractError("tape output must be a Tensor")
        self.output = output
        seen = {}
        stack = [output] if output.requires_grad else []
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    if parent.node_id >= node.node_id:
                        raise ContractError("tape is not topologically ordered")
                    stack.append(parent)
        self.nodes = sorted(seen.values(), key=lambda n: n.node_id)

    def __len__(self):
        return len(self.nodes)

    def backward(self, upstream=None):
        out = self.output
        if upstream is None:
            if out.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
            upstream = np.ones_like(out.data)
        pending = {out.node_id: np.asarray(upstream, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape(loss).backward()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def matmul(x, w):
    """``z[m, j] = sum_i x[m, i] * w[i, j]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return gx, gw

    return make_node(x.data @ w.data, (x, w), bw)


def conv2d(x, k, stride=1, pad=0):
    """Cross-correlation of ``x[b, c_in, h, w]`` with ``k[c_out, c_in, kh, kw]``."""
    x, k = as_tensor(x), as_tensor(k)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if not isinstance(pad, (int, np.integer)) or pad < 0:
        raise ConfigError(f"conv2d: pad must be a non-negative integer, got {pad!r}")
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {k.shape}")
    b, c, h, w = x.shape
    c_out, c_in, kh, kw = k.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} exceeds padded extent {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are (b, ho, wo), columns are (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    kmat = k.data.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (gmat.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros((b, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return make_node(np.ascontiguousarray(out), (x, k), bw)


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording them."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def truncation_enabled():
    return _truncate.get()


@contextlib.contextmanager
def gradient_truncation(enabled):
    """Switch :func:`stop_gradient` between truncating and transparent."""
    token = _truncate.set(bool(enabled))
    try:
        yield
    finally:
        _truncate.reset(token)


def stop_gradient(x):
    """Identity forward; contributes exactly zero gradient to ``x``."""
    x = as_tensor(x)
    if _truncate.get():
        return Tensor(x.data)
    return make_node(x.data, (x,), lambda g: (g,))


def relu(x):
    x = as_tensor(x)
    live = x.data > 0
    return make_node(np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def square(x):
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def rsqrt(x):
    x = as_tensor(x)
    r = 1.0 / np.sqrt(x.data)
    return make_node(r, (x,), lambda g: (-0.5 * r * r * r * g,))


def _norm_axes(x, axes):
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} is out of range for shape {x.shape}")
        out.append(ax % x.ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(x, axes=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(x, axes)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def reduce_mean(x, axes=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(x, axes)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_node(x.data.mean(axis=axes, keepdims=keepdims), (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))
