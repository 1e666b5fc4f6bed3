"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records primitive operations in execution order (define-by-run);
``Tape.backward`` walks the record once in reverse and returns gradients for
every leaf created with ``Tape.variable``.  Tensors built directly from data
are constants: they never receive gradients and are safe to share.  The op set
is exactly what a variational training objective needs, including ``lgamma``
with a ``digamma`` derivative for Dirichlet log densities.
"""

import numpy as np


class TensorError(Exception):
    """Base class for tensor/tape failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(TensorError):
    """An input lies outside the mathematical domain of the operation."""


class EmptyReductionError(TensorError):
    """A reduction was requested over zero elements."""


class GraphError(TensorError):
    """Tape contract violation (non-scalar loss, mixed tapes, cleared tape)."""


class Tensor:
    """A float64 array, optionally attached to a differentiation tape.

    ``data`` is the forward value.  ``node_id`` is the handle into the owning
    tape; a Tensor without one is a constant and never receives a gradient.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor({self.data!r}{tag})"

    # Operator sugar over the primitive registry below.
    def __add__(self, other):
        return shift(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return shift(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant Tensors; pass Tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops for one reverse pass.

    Topological order is the recording order.  ``backward`` visits each
    recorded node exactly once and accumulates gradients additively across
    fan-out, then clears the tape.  A tape is confined to a single thread.
    """

    def __init__(self):
        self._records = []  # (out_id, parent_ids, backward_fn)
        self._next_id = 0
        self._param_shapes = {}

    def variable(self, value) -> Tensor:
        """Create a leaf parameter that will receive a gradient."""
        t = Tensor(value, tape=self, node_id=self._next_id)
        self._param_shapes[self._next_id] = t.data.shape
        self._next_id += 1
        return t

    def _node(self, out_data, parents, backward) -> Tensor:
        out = Tensor(out_data, tape=self, node_id=self._next_id)
        self._next_id += 1
        parent_ids = tuple(p.node_id for p in parents)
        self._records.append((out.node_id, parent_ids, backward))
        return out

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar loss w.r.t. every ``variable`` leaf.

        Returns a dict node_id -> ndarray (zeros for unused leaves) and clears
        the tape afterwards.
        """
        if loss.tape is not self or loss.node_id is None:
            raise GraphError("loss is not a node on this tape")
        if loss.data.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = {loss.node_id: np.ones((), dtype=np.float64)}
        for out_id, parent_ids, backward_fn in reversed(self._records):
            out_grad = grads.pop(out_id, None)
            if out_grad is None:
                continue
            for pid, pgrad in zip(parent_ids, backward_fn(out_grad)):
                if pid is None or pgrad is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pgrad
                else:
                    grads[pid] = pgrad
        result = {}
        for pid, shape in self._param_shapes.items():
            g = grads.get(pid)
            result[pid] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64)
        self._records.clear()
        self._param_shapes = {}
        return result


def _owning_tape(op_name, parents):
    tapes = {p.tape for p in parents if p.tape is not None}
    if len(tapes) > 1:
        raise GraphError(f"{op_name}: operands belong to different tapes")
    return tapes.pop() if tapes else None


def _make(op_name, out_data, parents, backward) -> Tensor:
    tape = _owning_tape(op_name, parents)
    if tape is None:
        return Tensor(out_data)
    return tape._node(out_data, parents, backward)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_binary(op_name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op_name}: shapes {a.shape} and {b.shape} are not compatible"
        ) from None


def _first_violation(mask) -> int:
    return int(np.argmax(np.asarray(mask).ravel()))


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError(f"div: zero divisor at flat index {_first_violation(b.data == 0.0)}")
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / b_data, a.shape),
            _unbroadcast(-g * a_data / (b_data * b_data), b.shape),
        )

    return _make("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _make("neg", -a.data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make("exp", out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: non-positive input at flat index {_first_violation(a.data <= 0.0)}")
    out = np.log(a.data)
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return _make("log", out, (a,), backward)


def _sigmoid_values(x):
    # Stable form: never exponentiates a large positive argument.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_values(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    a_data = a.data

    def backward(g):
        return (g * (a_data > 0.0),)

    return _make("relu", out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def backward(g):
        # sigmoid(x) = 1 - exp(-softplus(x)), reusing the forward value
        return (g * (1.0 - np.exp(-out)),)

    return _make("softplus", out, (a,), backward)


def scale(a, c) -> Tensor:
    """Multiply by a Python scalar (not differentiated w.r.t. ``c``)."""
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), backward)


def shift(a, c) -> Tensor:
    """Add a Python scalar (not differentiated w.r.t. ``c``)."""
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g,)

    return _make("shift", a.data + c, (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _make("matmul", out, (a, b), backward)


def _check_axis(op_name, a, axis):
    if axis is None:
        if a.size == 0:
            raise EmptyReductionError(f"{op_name}: reduction over zero elements")
        return
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{op_name}: axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise EmptyReductionError(f"{op_name}: axis {axis} has zero extent")


def _spread(g, shape, axis):
    # Broadcast a reduced gradient back over the reduced axis (or all axes).
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def backward(g):
        return (_spread(g, shape, axis),)

    return _make("sum", out, (a,), backward)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    out = a.data.mean(axis=axis)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def backward(g):
        return (_spread(g, shape, axis) / n,)

    return _make("mean", out, (a,), backward)


def tmax(a, axis=None) -> Tensor:
    """Max reduction; gradient routes to the lowest-index maximum."""
    a = as_tensor(a)
    _check_axis("max", a, axis)
    out = a.data.max(axis=axis)
    a_data = a.data

    if axis is None:
        pick = np.zeros(a.shape, dtype=np.float64)
        pick.ravel()[int(np.argmax(a_data))] = 1.0
    else:
        hit = a_data == np.expand_dims(out, axis)
        first = np.cumsum(hit, axis=axis) == 1
        pick = (hit & first).astype(np.float64)

    def backward(g):
        if axis is None:
            return (pick * g,)
        return (pick * np.expand_dims(g, axis),)

    return _make("max", out, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("log_softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), backward)


def stack(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise EmptyReductionError("stack: no tensors given")
    out = np.stack([t.data for t in tensors])

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make("stack", out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Log-gamma / digamma

# Lanczos approximation, g=7 with 9 coefficients; absolute error below 1e-10
# across [1e-3, 1e6].
_LANCZOS_G = 7.0
_LANCZOS_COEFFS = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lgamma_core(x):
    # Valid for x >= 0.5.
    z = x - 1.0
    series = np.full_like(z, _LANCZOS_COEFFS[0])
    for i in range(1, len(_LANCZOS_COEFFS)):
        series = series + _LANCZOS_COEFFS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)


def lgamma_values(x) -> np.ndarray:
    """log Gamma for strictly positive arrays (reflection below 0.5)."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    safe = np.where(small, 1.0, x)
    direct = _lgamma_core(safe)
    if np.any(small):
        xs = np.where(small, x, 0.25)
        reflected = np.log(np.pi / np.sin(np.pi * xs)) - _lgamma_core(1.0 - xs)
        return np.where(small, reflected, direct)
    return direct


# Asymptotic expansion coefficients for digamma: -B_2n / (2n) over x^(2n).
_DIGAMMA_SERIES = (
    -1.0 / 12.0,
    1.0 / 120.0,
    -1.0 / 252.0,
    1.0 / 240.0,
    -1.0 / 132.0,
    691.0 / 32760.0,
)


def digamma_values(x) -> np.ndarray:
    """psi(x) for strictly positive arrays: shift to x >= 6, then series."""
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    cur = x.copy()
    for _ in range(6):
        low = cur < 6.0
        if not np.any(low):
            break
        acc = acc - np.where(low, 1.0 / cur, 0.0)
        cur = cur + low
    inv2 = 1.0 / (cur * cur)
    series = np.zeros_like(cur)
    power = inv2.copy()
    for coeff in _DIGAMMA_SERIES:
        series = series + coeff * power
        power = power * inv2
    return acc + np.log(cur) - 0.5 / cur + series


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(
            f"lgamma: non-positive input at flat index {_first_violation(a.data <= 0.0)}"
        )
    out = lgamma_values(a.data)
    a_data = a.data

    def backward(g):
        return (g * digamma_values(a_data),)

    return _make("lgamma", out, (a,), backward)


# Registry used by gradient-vs-finite-difference property tests: op name ->
# (callable, arity, domain low, domain high).
ELEMENTWISE_OPS = {
    "add": (add, 2, -3.0, 3.0),
    "sub": (sub, 2, -3.0, 3.0),
    "mul": (mul, 2, -3.0, 3.0),
    "div": (div, 2, 0.5, 3.0),
    "neg": (neg, 1, -3.0, 3.0),
    "exp": (exp, 1, -3.0, 3.0),
    "log": (log, 1, 0.1, 5.0),
    "sigmoid": (sigmoid, 1, -5.0, 5.0),
    "tanh": (tanh, 1, -3.0, 3.0),
    "relu": (relu, 1, 0.1, 3.0),
    "softplus": (softplus, 1, -5.0, 5.0),
    "lgamma": (lgamma, 1, 0.2, 8.0),
    "scalar-scale": (lambda a: scale(a, 1.7), 1, -3.0, 3.0),
    "scalar-shift": (lambda a: shift(a, -0.4), 1, -3.0, 3.0),
}
