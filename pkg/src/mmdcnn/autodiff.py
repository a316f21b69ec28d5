"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient. Every operation
records its inputs and per-input vector-Jacobian products on the output
node; ``backward`` replays the recorded nodes in exact reverse creation
order and accumulates gradients additively. The op set is deliberately
small: what a conv/pool/dense/softmax classifier and a kernel two-sample
statistic need, nothing more. There is no broadcasting beyond
multiplication by a python scalar.
"""
from __future__ import annotations

import itertools

import numpy as np

LOG_EPS = 1e-12

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was asked to run over an unusable graph."""


def _as_float_array(values):
    arr = np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array node in an autodiff graph (row-major storage)."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_vjps", "_node_id")

    def __init__(self, data, requires_grad=False):
        arr = _as_float_array(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._vjps = ()
        self._node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Convenience operators; all delegate to the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_from(shape, values, requires_grad=False):
    """Build a Tensor from an explicit shape and a flat value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    flat = _as_float_array(values).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ShapeError(f"shape {shape} needs {expected} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(op_name, out_data, inputs, vjps):
    """Record one differentiable operation.

    ``vjps[i]`` maps the upstream gradient to the gradient of ``inputs[i]``;
    a None entry marks an input that never receives gradient. Forward
    outputs are checked for NaN/Inf so divergence fails loudly at the op
    that produced it.
    """
    out_data = np.asarray(out_data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values in forward output of '{op_name}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out._op = op_name
    if out.requires_grad:
        out._parents = tuple(inputs)
        out._vjps = tuple(vjps)
    else:
        out._parents = ()
        out._vjps = ()
    out._node_id = next(_node_ids)
    return out


def _require_same_shape(op_name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("mul", a, b)
    return make_op(
        "mul", a.data * b.data, (a, b),
        (lambda g: g * b.data, lambda g: g * a.data),
    )


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return make_op("scale", a.data * s, (a,), (lambda g: g * s,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at exactly 0 is 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.data)
    return make_op("exp", out, (a,), (lambda g: g * out,))


def log(a):
    """Natural log of max(x, 1e-12); the clamp keeps cross-entropy finite."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_EPS)
    return make_op("log", np.log(clamped), (a,), (lambda g: g / clamped,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
                "log": log, "scale": scale}


def elementwise(op, a, b=None):
    """Dispatch an elementwise op by name (binary ops require b)."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op '{op}'")
    fn = _ELEMENTWISE[op]
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"'{op}' needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"'{op}' is unary")
    return fn(a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    return make_op(
        "matmul", a.data @ b.data, (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    return make_op(
        "sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
        (lambda g: np.full(shape, np.asarray(g, dtype=dtype)[()]),),
    )


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), (lambda g: g.reshape(orig),))


def astype(a, dtype):
    """Cast values; gradients cast back to the input dtype."""
    a = as_tensor(a)
    orig = a.data.dtype
    return make_op("astype", a.data.astype(dtype), (a,), (lambda g: g.astype(orig),))


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    Nodes are replayed in exact reverse creation order (a valid reverse
    topological order because inputs always predate their outputs).
    Gradients accumulate additively at fan-out points.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._op == "leaf":
        raise GraphError("backward on an empty graph: loss is not the output of any recorded op")

    # Collect every node reachable through recorded parents.
    seen = {loss._node_id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent._node_id not in seen:
                seen[parent._node_id] = parent
                stack.append(parent)

    pending = {loss._node_id: np.ones_like(loss.data)}
    for node in sorted(seen.values(), key=lambda n: n._node_id, reverse=True):
        g = pending.pop(node._node_id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None or not parent.requires_grad:
                continue
            pg = np.asarray(vjp(g))
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient from backward of '{node._op}'")
            if parent._node_id in pending:
                pending[parent._node_id] = pending[parent._node_id] + pg
            else:
                pending[parent._node_id] = pg


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    Error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check input must require gradients")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        f_minus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
