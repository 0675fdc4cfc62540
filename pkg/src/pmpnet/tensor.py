"""A small reverse-mode autodiff tensor over float64 numpy arrays.

Only the operations the point-moving network needs are provided.  Results of
an op are tracked (carry a backward closure) only when at least one input is
tracked, so computations on plain tensors build no graph at all.
"""

import numpy as np

_nodes_created = 0


def graph_nodes_created():
    """Number of backward-graph nodes recorded since import."""
    return _nodes_created


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._freed = False

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None and not self._freed

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    # -- operators ----------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis):
        return max_(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def _bad_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    global _nodes_created
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
        _nodes_created += 1
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "div")


def matmul(a, b):
    """Matrix product of a ``m x k`` and a ``k x n`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[x.shape for x in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------- unary ops


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, idx):
    """Gather along the first axis; ``idx`` may have any integer shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"take: integer indices required, got {idx.dtype}")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "take")


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at a zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a.data,)

    return _make(n, (a,), bw, "norm")


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return _make(np.mean(a.data, axis=axis), (a,), bw, "mean")


def max_(a, axis):
    """Max along ``axis``; gradient flows to the first maximal entry."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw, "max")


# ---------------------------------------------------------------- backward


def _topo(root):
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


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("graph already freed; recompute the loss or pass retain_graph=True")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tracked tensor")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node._freed:
                raise RuntimeError("graph already freed; recompute the loss or pass retain_graph=True")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True
