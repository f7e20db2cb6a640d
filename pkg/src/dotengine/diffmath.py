"""Dense float64 tensor arithmetic with exact reverse-mode gradients.

This is a deliberately small dynamic-graph engine: every operation records
its parents and a backward closure on the produced tensor, and
:func:`backward` replays the recorded closures in exact reverse topological
(creation) order. The attention network trained on top of it is tiny, so
simplicity and determinism win over any compiled-graph cleverness.

All data is float64. Gradients for every differentiable op are exact;
``relu`` uses subgradient 0 at the origin.
"""

import itertools
import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "ContractError",
    "constant",
    "parameter",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "softmax_rows",
    "tensor_sum",
    "logsumexp_rows",
    "gather_rows",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "elementwise",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. non-scalar loss)."""


_ids = itertools.count()


class Tensor:
    """A node in the computation graph.

    Wraps a float64 ndarray. Leaf tensors created with ``requires_grad=True``
    accumulate gradients in ``.grad`` when :func:`backward` runs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_bwd", "_id")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._bwd = _bwd
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"

    # operator sugar; the module-level functions carry the semantics
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def constant(data, name=None):
    """Wrap an array as a non-trainable graph leaf."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    """Wrap an array as a trainable graph leaf."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def matmul(a, b):
    """Matrix product of two 2-d tensors.

    Gradient contract: dL/da = g @ b.T, dL/db = a.T @ g.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out_data, _parents=(a, b), _bwd=bwd)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return Tensor(a.data.T, _parents=(a,), _bwd=lambda g: (g.T,))


def _binary(a, b, fn, bwd_fn):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = fn(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"incompatible shapes {a.data.shape} and {b.data.shape}") from err

    def bwd(g):
        ga, gb = bwd_fn(g, a.data, b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out_data, _parents=(a, b), _bwd=bwd)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: (g, g))


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: (g, -g))


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: (g * y, g * x))


def div(a, b):
    return _binary(a, b, np.divide, lambda g, x, y: (g / y, -g * x / (y * y)))


def scale(a, c):
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    c = float(c)
    return Tensor(a.data * c, _parents=(a,), _bwd=lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 defined as 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _bwd=lambda g: (g * mask,))


_erf = np.vectorize(math.erf, otypes=[np.float64])


def gelu(a):
    """Exact GELU via the Gaussian CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)

    def bwd(g):
        return (g * (cdf + x * pdf),)

    return Tensor(x * cdf, _parents=(a,), _bwd=bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return Tensor(out_data, _parents=(a,), _bwd=lambda g: (g * out_data,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    return Tensor(np.log(a.data), _parents=(a,), _bwd=lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt requires nonnegative input")
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(out_data, 1e-300),)

    return Tensor(out_data, _parents=(a,), _bwd=bwd)


_ELEMENTWISE = {}


def elementwise(op, a, b=None):
    """Dispatch an elementwise op by name: add/sub/mul/scale/relu/exp/log/sqrt."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    fn, arity = _ELEMENTWISE[op]
    if arity == 2:
        if b is None:
            raise ContractError(f"{op!r} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op!r} takes one operand")
    return fn(a)


_ELEMENTWISE.update(
    {
        "add": (add, 2),
        "sub": (sub, 2),
        "mul": (mul, 2),
        "div": (div, 2),
        "scale": (scale, 2),
        "relu": (relu, 1),
        "exp": (exp, 1),
        "log": (log, 1),
        "sqrt": (sqrt, 1),
    }
)


def softmax_rows(a):
    """Row-wise softmax with per-row max subtraction for stability."""
    a = _as_tensor(a)
    x = np.atleast_2d(a.data)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        g2 = np.atleast_2d(g)
        dot = (g2 * out_data).sum(axis=1, keepdims=True)
        grad = out_data * (g2 - dot)
        return (grad.reshape(a.data.shape),)

    return Tensor(out_data.reshape(a.data.shape), _parents=(a,), _bwd=bwd)


def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return Tensor(out_data, _parents=(a,), _bwd=bwd)


def logsumexp_rows(a):
    """Stable row-wise log-sum-exp, returning a (p, 1) column."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a matrix, got shape {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out_data = m + np.log(s)

    def bwd(g):
        return (g * (e / s),)

    return Tensor(out_data, _parents=(a,), _bwd=bwd)


def gather_rows(a, indices):
    """Pick a[i, indices[i]] for each row, returning a (p, 1) column."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError("gather_rows expects a matrix and one index per row")
    if np.any(idx < 0) or np.any(idx >= a.data.shape[1]):
        raise ContractError("gather_rows index out of range")
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx][:, None]

    def bwd(g):
        grad = np.zeros_like(a.data)
        grad[rows, idx] = g[:, 0]
        return (grad,)

    return Tensor(out_data, _parents=(a,), _bwd=bwd)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(tensors)))

    return Tensor(out_data, _parents=tuple(tensors), _bwd=bwd)


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(tensors)))

    return Tensor(out_data, _parents=tuple(tensors), _bwd=bwd)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"bad column slice [{start}:{stop}] for shape {a.data.shape}")
    out_data = a.data[:, start:stop]

    def bwd(g):
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        return (grad,)

    return Tensor(out_data, _parents=(a,), _bwd=bwd)


def _topo_order(loss):
    """Deterministic topological order of the subgraph below ``loss``."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent._id not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss node.

    Returns a dict mapping each trainable leaf reached from ``loss`` to its
    gradient array, and also stores it on the leaf's ``.grad``. Disconnected
    trainable leaves simply do not appear in the map (their gradient is zero).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads = {loss._id: np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            result[node] = node.grad
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return result


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
