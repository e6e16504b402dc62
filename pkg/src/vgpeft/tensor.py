"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to one gradient per parent. :func:`backward` walks the
graph in reverse topological order. Intermediate gradients live only for
the duration of one backward call; leaf tensors (parameters) accumulate
into ``.grad`` until :meth:`Tensor.zero_grad` is called.
"""

import math

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named model weight. ``requires_grad`` always mirrors ``trainable``."""

    WEIGHT = "weight"
    BIAS = "bias"

    def __init__(self, data, kind=WEIGHT, trainable=True, path=""):
        super().__init__(data, requires_grad=trainable)
        if kind not in (self.WEIGHT, self.BIAS):
            raise ValueError(f"unknown parameter kind {kind!r}")
        if kind == self.BIAS and self.data.ndim != 1:
            raise DimensionError(f"bias parameter must be rank-1, got shape {self.shape}")
        self.kind = kind
        self.path = path

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self):
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.path!r}, {self.kind}, shape={self.shape}, {state})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    """Wrap an op result; attach graph edges only if some parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def bias_add(x, bias):
    """Add a rank-1 ``bias`` along the last axis of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias_add: bias {bias.shape} does not match last axis of {x.shape}")
    data = x.data + bias.data
    red = tuple(range(x.ndim - 1))
    return _node(data, (x, bias), lambda g: (g, g.sum(axis=red)), "bias_add")


def square(x):
    return mul(x, x)


def absolute(x):
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    data = np.where(pick_a, a.data, b.data)
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)), "minimum")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    data = np.where(pick_a, a.data, b.data)
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)), "maximum")


def where(cond, a, b):
    """Select from ``a`` where the constant boolean mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    data = np.where(cond, a.data, b.data)
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,), "exp")


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def logit(p):
    """Inverse sigmoid ``log(p / (1 - p))`` for p in (0, 1)."""
    p = as_tensor(p)
    return log(p) - log(1.0 - p)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _node(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b):
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward, "matmul")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1, a2):
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, tuple(tensors), backward, "concat")


def index(x, key):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(x.data[key], (x,), backward, "index")


def embedding(table, ids):
    """Gather rows of ``table`` (vocab x d) for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# reductions and normalisation


def _check_axis(x, axis, op):
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for tensor of rank {x.ndim}")


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    _check_axis(x, axis, "sum")
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(data, dtype=DTYPE), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    _check_axis(x, axis, "mean")
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    x = as_tensor(x)
    _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    # eps=0 on a constant slice: treat it as zero-variance, output beta
    inv = np.divide(1.0, np.sqrt(denom), out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gx = gx_hat = None
        if x.requires_grad:
            gx_hat = g * gamma.data
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _node(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Propagate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Leaf gradients accumulate across calls. Intermediate gradients are not
    retained.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded graph")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
