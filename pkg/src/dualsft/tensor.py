"""Dense float64 linear algebra plus a reverse-mode differentiation tape.

The tape is array-valued (numpy arrays at every node), small enough to read
in one sitting, and only implements the operations the toy models need:
elementwise arithmetic with broadcasting, affine maps, tanh/exp/log, axis
sums, 1-d slicing and reshapes. Second-order quantities are obtained by
central finite differences of the tape gradient rather than by a
forward-over-reverse pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

MAX_DENSE_DIM = 4096

# Finite-difference step policies: gradients are checked with
# h = 1e-4 * max(1, |x_d|), Hessian columns use h = 1e-3 * max(1, |x_d|).
GRAD_FD_STEP = 1e-4
HESS_FD_STEP = 1e-3


class NumericsError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# Parameter vectors with named layer segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class ParameterVector:
    """Flat real vector with an ordered list of named layer segments."""

    values: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not self.segments:
            self.segments = [Segment("all", 0, (self.values.size,))]
        self.validate()

    def validate(self):
        cursor = 0
        for seg in self.segments:
            if seg.offset != cursor:
                raise ValueError(f"segment {seg.name!r} starts at {seg.offset}, expected {cursor}")
            cursor += seg.size
        if cursor != self.values.size:
            raise ValueError(f"segments cover {cursor} entries, vector has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise NumericsError(f"non-finite entry in segment {self.segment_of(bad)!r}")

    @property
    def dim(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def segment_of(self, index: int) -> str:
        for seg in self.segments:
            if seg.offset <= index < seg.offset + seg.size:
                return seg.name
        raise IndexError(index)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), list(self.segments))

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), list(self.segments))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()[:16]

    @classmethod
    def from_arrays(cls, named_arrays: list[tuple[str, np.ndarray]]) -> "ParameterVector":
        segments, chunks, offset = [], [], 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segments.append(Segment(name, offset, arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        return cls(np.concatenate(chunks) if chunks else np.zeros(0), segments)


@dataclass
class PerSampleGradients:
    """One gradient row per example, all taken at the same checkpoint."""

    rows: np.ndarray  # (N, D)
    checkpoint_id: str

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError("per-sample gradients need an (N, D) matrix with N >= 1")

    @property
    def num_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def total(self) -> np.ndarray:
        # Fixed ascending-index reduction keeps scores bit-reproducible.
        return np.add.reduce(self.rows, axis=0)


@dataclass
class DenseHessian:
    entries: np.ndarray  # (D, D), symmetric
    source: str = "finite-difference"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Var:
    """Node in the differentiation tape. Holds a float64 array value and,
    after backward(), the accumulated adjoint in .grad."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = Var(a.value + b.value, (a, b),
              lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))
    return out


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.value.shape),
                          _unbroadcast(g * a.value, b.value.shape)))


def tanh(a: Var) -> Var:
    a = _lift(a)
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Var) -> Var:
    a = _lift(a)
    e = np.exp(a.value)
    return Var(e, (a,), lambda g: (g * e,))


def log(a: Var) -> Var:
    a = _lift(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    a = _lift(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.value.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def affine(x: Var, weight: Var, bias: Var | None) -> Var:
    """x @ weight.T (+ bias) over trailing feature axis; x may carry extra
    leading batch/position axes."""
    x, weight = _lift(x), _lift(weight)
    out_val = x.value @ weight.value.T
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        out_val = out_val + bias.value
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.value.shape[0])
        x2 = x.value.reshape(-1, weight.value.shape[1])
        grads = [g @ weight.value, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Var(out_val, tuple(parents), backward)


def matvec(matrix: np.ndarray, x: Var) -> Var:
    """Constant matrix times tape vector."""
    x = _lift(x)
    matrix = np.asarray(matrix, dtype=np.float64)
    return Var(matrix @ x.value, (x,), lambda g: (matrix.T @ g,))


def slice1d(x: Var, start: int, stop: int) -> Var:
    x = _lift(x)

    def backward(g):
        out = np.zeros_like(x.value)
        out[start:stop] = g
        return (out,)

    return Var(x.value[start:stop], (x,), backward)


def reshape(x: Var, shape) -> Var:
    x = _lift(x)
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.value.shape),))


def logsumexp(x: Var, axis=-1) -> Var:
    # Detached max keeps exp() in range without entering the gradient.
    shift = Var(np.max(x.value, axis=axis, keepdims=True))
    return add(log(vsum(exp(x - shift), axis=axis, keepdims=True)), shift)


def backward(root: Var):
    """Reverse accumulation from a scalar root."""
    if root.value.size != 1:
        raise ValueError("backward() starts from a scalar")
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Differentiation entry points
# ---------------------------------------------------------------------------

def value_and_grad(objective, point: ParameterVector) -> tuple[float, ParameterVector]:
    """Evaluate a tape-built scalar objective and its gradient at `point`.

    `objective` receives the parameters as a Var of shape (D,) and must
    return a scalar Var.
    """
    theta = Var(point.values.copy())
    loss = objective(theta)
    loss_val = float(loss.value)
    if not np.isfinite(loss_val):
        raise NumericsError("non-finite loss value")
    backward(loss)
    grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericsError(f"non-finite gradient in segment {point.segment_of(bad)!r}")
    return loss_val, point.with_values(grad)


def per_sample_grads(example_loss, batch, point: ParameterVector) -> PerSampleGradients:
    """Gradient of each example's loss at `point`, one row per example.

    `example_loss(theta_var, example)` must build the per-example scalar.
    Rows are computed (and may in principle be computed concurrently) per
    sample; the reduction in PerSampleGradients.total replays ascending
    index order.
    """
    batch = list(batch)
    if len(batch) < 1:
        raise ValueError("per-sample gradients need at least one example")
    rows = np.empty((len(batch), point.dim))
    for n, example in enumerate(batch):
        _, grad = value_and_grad(lambda th: example_loss(th, example), point)
        rows[n] = grad.values
    return PerSampleGradients(rows, point.fingerprint())


def _gradient_array(objective, point: ParameterVector, values: np.ndarray) -> np.ndarray:
    _, grad = value_and_grad(objective, point.with_values(values))
    return grad.values


def dense_hessian(objective, point: ParameterVector) -> DenseHessian:
    """Central finite differences of the tape gradient, then symmetrized."""
    dim = point.dim
    if dim > MAX_DENSE_DIM:
        raise ValueError(
            f"dense Hessian limited to D <= {MAX_DENSE_DIM} (got {dim}); use hvp() instead")
    base = point.values
    entries = np.empty((dim, dim))
    for d in range(dim):
        h = HESS_FD_STEP * max(1.0, abs(base[d]))
        plus, minus = base.copy(), base.copy()
        plus[d] += h
        minus[d] -= h
        entries[:, d] = (_gradient_array(objective, point, plus)
                         - _gradient_array(objective, point, minus)) / (2.0 * h)
    entries = 0.5 * (entries + entries.T)
    return DenseHessian(entries)


def hvp(objective, point: ParameterVector, direction: np.ndarray) -> ParameterVector:
    """Hessian-vector product by central differencing the gradient along
    the (normalized) direction."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (point.dim,):
        raise ValueError(f"direction must have length {point.dim}")
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return point.with_values(np.zeros(point.dim))
    unit = direction / norm
    h = HESS_FD_STEP * max(1.0, np.max(np.abs(point.values)))
    gplus = _gradient_array(objective, point, point.values + h * unit)
    gminus = _gradient_array(objective, point, point.values - h * unit)
    out = (gplus - gminus) * (norm / (2.0 * h))
    if not np.all(np.isfinite(out)):
        raise NumericsError("non-finite intermediate in hvp")
    return point.with_values(out)
