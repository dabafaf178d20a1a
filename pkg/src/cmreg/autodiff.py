"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Value`` wraps a numpy array and records the operation that produced it,
so a scalar result can be backpropagated through an arbitrary DAG.  The
primitive set is deliberately small: just enough to express graph-conv
backbones, attention blocks, and the contrastive / matching losses used by
the registration pipeline.  Everything is double precision so finite
difference checks are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """Operand values outside the mathematical domain of the op (e.g. log(<=0))."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Value:
    """A node in the computation graph holding a float64 tensor."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Value":
        return x if isinstance(x, Value) else Value(x)

    def __add__(self, other):
        other = self._lift(other)
        try:
            out_data = self.data + other.data
        except ValueError:
            raise ShapeError(f"add: shapes {self.shape} and {other.shape} do not broadcast")

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Value(out_data, _parents=(self, other), _backward=bwd, op="add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            if self.requires_grad:
                self._accumulate(-g)
        return Value(-self.data, _parents=(self,), _backward=bwd, op="neg")

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        try:
            out_data = self.data * other.data
        except ValueError:
            raise ShapeError(f"mul: shapes {self.shape} and {other.shape} do not broadcast")

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Value(out_data, _parents=(self, other), _backward=bwd, op="mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Value):
            raise TypeError("division only supported by python scalars")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: shapes {self.shape} and {other.shape} do not conform")
        out_data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Value(out_data, _parents=(self, other), _backward=bwd, op="matmul")

    # -- shape manipulation ---------------------------------------------

    def transpose(self, axes=None):
        def bwd(g):
            if self.requires_grad:
                inv = None if axes is None else np.argsort(axes)
                self._accumulate(np.transpose(g, inv))
        return Value(np.transpose(self.data, axes), _parents=(self,), _backward=bwd, op="transpose")

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old_shape))
        try:
            out_data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {old_shape} as {shape}")
        return Value(out_data, _parents=(self,), _backward=bwd, op="reshape")

    def gather_rows(self, indices):
        """Select rows along axis 0; backward scatter-adds into the source."""
        idx = np.asarray(indices, dtype=np.int64)

        def bwd(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                np.add.at(acc, idx, g)
                self._accumulate(acc)

        return Value(self.data[idx], _parents=(self,), _backward=bwd, op="gather")

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None):
        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.full_like(self.data, float(g)))
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.shape).copy())
        return Value(self.data.sum(axis=axis), _parents=(self,), _backward=bwd, op="sum")

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) / n

    def max(self, axis):
        """Max-reduce along `axis`; gradient routes to the argmax only.

        Ties go to the lowest index along the axis (np.argmax convention).
        """
        arg = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def bwd(g):
            if not self.requires_grad:
                return
            acc = np.zeros_like(self.data)
            np.put_along_axis(acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            self._accumulate(acc)

        return Value(out_data, _parents=(self,), _backward=bwd, op="max")

    def l2norm(self, axis=None):
        """Euclidean norm over all elements or along one axis."""
        sq = np.sum(self.data ** 2, axis=axis)
        out_data = np.sqrt(sq)

        def bwd(g):
            if not self.requires_grad:
                return
            denom = np.maximum(out_data, 1e-300)
            if axis is None:
                self._accumulate(g * self.data / denom)
            else:
                scale = np.expand_dims(g / denom, axis)
                self._accumulate(scale * self.data)

        return Value(out_data, _parents=(self,), _backward=bwd, op="l2norm")

    # -- nonlinearities -------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * out_data)
        return Value(out_data, _parents=(self,), _backward=bwd, op="exp")

    def log(self):
        if np.any(self.data <= 0):
            raise DomainError("log: operand has non-positive entries")
        def bwd(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        return Value(np.log(self.data), _parents=(self,), _backward=bwd, op="log")

    def clamped_log(self, floor: float = 1e-7):
        """log(max(x, floor)); zero gradient where the floor is active."""
        clamped = np.maximum(self.data, floor)
        active = self.data > floor

        def bwd(g):
            if self.requires_grad:
                self._accumulate(np.where(active, g / clamped, 0.0))
        return Value(np.log(clamped), _parents=(self,), _backward=bwd, op="clamped_log")

    def xlogx(self):
        """x * log(x) with the 0*log(0) = 0 convention (entropy terms)."""
        safe = np.where(self.data > 0, self.data, 1.0)
        out_data = np.where(self.data > 0, self.data * np.log(safe), 0.0)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(np.where(self.data > 0, g * (np.log(safe) + 1.0), 0.0))
        return Value(out_data, _parents=(self,), _backward=bwd, op="xlogx")

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))
        return Value(out_data, _parents=(self,), _backward=bwd, op="sigmoid")

    def leaky_relu(self, slope: float = 0.2):
        factor = np.where(self.data > 0, 1.0, slope)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * factor)
        return Value(self.data * factor, _parents=(self,), _backward=bwd, op="leaky_relu")

    def relu(self):
        return self.leaky_relu(0.0)

    def softmax(self, axis: int = -1):
        if not np.all(np.isfinite(self.data)):
            raise DomainError("softmax: operand has non-finite entries")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            if self.requires_grad:
                dot = np.sum(g * out_data, axis=axis, keepdims=True)
                self._accumulate(out_data * (g - dot))

        return Value(out_data, _parents=(self,), _backward=bwd, op="softmax")


def concat(values, axis: int = 0) -> Value:
    values = [Value._lift(v) for v in values]
    try:
        out_data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in values]} do not conform on axis {axis}")
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                v._accumulate(g[tuple(sl)])

    return Value(out_data, _parents=tuple(values), _backward=bwd, op="concat")


def repeat_rows(v: Value, n: int) -> Value:
    """Tile a 1 x C (or C,) value into n identical rows."""
    row = v.reshape(1, -1) if v.data.ndim == 1 else v
    return row.gather_rows(np.zeros(n, dtype=np.int64))


def backward(root: Value) -> None:
    """Backpropagate from a scalar root through the whole DAG.

    Each node's closure runs exactly once, in reverse topological order.
    Calling backward twice without zeroing grads accumulates.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")

    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    # run the pass on fresh buffers so a second backward adds exactly one
    # more pass worth of gradient instead of re-propagating stale values
    prev = [(n, n.grad) for n in topo if n.grad is not None]
    for n in topo:
        n.grad = None
    root._accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad if node.grad is not None else np.zeros_like(node.data))
    for n, g in prev:
        if n.grad is None:
            n.grad = g
        else:
            n.grad = n.grad + g


# -- gradient checking --------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    per_element_table: list = field(default_factory=list)


def grad_check(f, inputs, epsilon: float = 1e-5, tolerance: float = 1e-3,
               record_table: bool = False) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `f` to central differences.

    `inputs` is a list of Values with requires_grad=True; `f(inputs)` must
    return a scalar Value and be deterministic (checked by double eval).
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out1 = f(inputs)
    out2 = f(inputs)
    if not np.array_equal(out1.data, out2.data):
        raise RuntimeError("grad_check: f is not deterministic (double evaluation mismatch)")

    for v in inputs:
        v.zero_grad()
    root = f(inputs)
    backward(root)
    analytic = [np.zeros_like(v.data) if v.grad is None else v.grad.copy() for v in inputs]

    max_rel = 0.0
    max_abs = 0.0
    table = []
    for vi, v in enumerate(inputs):
        flat = v.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = float(f(inputs).data)
            flat[j] = orig - epsilon
            f_minus = float(f(inputs).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[vi].reshape(-1)[j])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel_err)
            max_abs = max(max_abs, abs_err)
            if record_table:
                table.append(((vi, j), a, numeric))
    return GradCheckReport(max_rel_error=max_rel, max_abs_error=max_abs,
                           passed=max_rel <= tolerance, per_element_table=table)


# -- optimization -------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates plus step counter, keyed like params."""
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, from each param's .grad."""
    state.step += 1
    t = state.step
    for k, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {k!r}")
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = state.m[k] / (1 - beta1 ** t)
        v_hat = state.v[k] / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at_epoch(base_lr: float, epoch: int, milestones=(50, 75), factor: float = 0.5) -> float:
    """Step schedule: multiply by `factor` at each milestone epoch reached."""
    lr = base_lr
    for m in milestones:
        if epoch >= m:
            lr *= factor
    return lr
