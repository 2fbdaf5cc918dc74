"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records an entry on the active (thread-local)
tape; ``backward`` replays the tape in strict reverse execution order and
accumulates gradients into the requires-grad leaves. One tape per forward
pass: open a ``with Tape():`` block around a training step and the whole graph
is freed when the block exits. Ops executed with no active tape run in pure
inference mode and record nothing.

Shapes never broadcast silently: the only implicit mixing allowed is
scalar-with-tensor. Everything else (bias rows, neighbor gathers) has an
explicit op.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# When True, every op that declares finite output asserts it. Slow; meant for
# tests and debugging runs.
debug_check_finite = False


class ShapeMismatch(ValueError):
    """Raised when an op's operands have incompatible shapes."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its numeric domain."""


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Entry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; topological order equals execution order."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        self._entries.clear()
        return False

    def _record(self, out, inputs, backward_fn):
        self._entries.append(_Entry(out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._entries)


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_producer")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._producer: Tape | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self._producer is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flags})"

    # -- operator sugar ------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _make(op: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if debug_check_finite and not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{op}: non-finite output")
    tape = active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = np.ascontiguousarray(values)
    out.grad = None
    out.requires_grad = requires
    out._producer = tape if requires else None
    if requires:
        tape._record(out, inputs, backward_fn)
    return out


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every requires-grad leaf with d(root)/d(leaf).

    ``root`` must be a scalar recorded on the live tape. Repeated calls
    without ``zero_grad`` accumulate.
    """
    if root.size != 1:
        raise ShapeMismatch(f"backward: root must be scalar, got shape {root.shape}")
    tape = active_tape()
    if root.is_leaf():
        if not root.requires_grad:
            raise ValueError("backward: root does not require gradients")
        if root.grad is None:
            root.grad = np.zeros_like(root.values)
        root.grad += np.ones_like(root.values)
        return
    if tape is None or root._producer is not tape:
        raise ValueError("backward: root is not recorded on the live tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for entry in reversed(tape._entries):
        out_grad = grads.pop(id(entry.out), None)
        if out_grad is None:
            continue
        in_grads = entry.backward_fn(out_grad)
        for tensor, g in zip(entry.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf():
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.values)
                tensor.grad += g
            else:
                key = id(tensor)
                held = grads.get(key)
                grads[key] = g if held is None else held + g


# --------------------------------------------------------------------------
# Elementwise arithmetic (scalar-with-tensor is the only implicit broadcast)
# --------------------------------------------------------------------------


def _scalar_reduce(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return np.sum(g).reshape(target.shape).astype(g.dtype)


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_same_shape("add", a, b)
    out = a.values + b.values

    def bw(g):
        return _scalar_reduce(g, a), _scalar_reduce(g, b)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_same_shape("sub", a, b)
    out = a.values - b.values

    def bw(g):
        return _scalar_reduce(g, a), _scalar_reduce(-g, b)

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_same_shape("mul", a, b)
    out = a.values * b.values

    def bw(g):
        return _scalar_reduce(g * b.values, a), _scalar_reduce(g * a.values, b)

    return _make("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_same_shape("div", a, b)
    if np.any(b.values == 0):
        raise DomainError("div: zero denominator")
    out = a.values / b.values

    def bw(g):
        ga = _scalar_reduce(g / b.values, a)
        gb = _scalar_reduce(-g * a.values / (b.values * b.values), b)
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.values, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a fixed scalar exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    if p != int(p) and np.any(a.values < 0):
        raise DomainError("power: negative base with non-integer exponent")
    out = a.values**p

    def bw(g):
        return (g * p * a.values ** (p - 1.0),)

    return _make("power", out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0)

    def bw(g):
        return (g * (out > 0),)

    return _make("relu", out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log: non-positive input")
    out = np.log(a.values)

    def bw(g):
        return (g / a.values,)

    return _make("log", out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.values)

    def bw(g):
        return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), bw)


def absolute(a) -> Tensor:
    """Elementwise |a|; subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    sign = np.sign(a.values)

    def bw(g):
        return (g * sign,)

    return _make("abs", np.abs(a.values), (a,), bw)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatch(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.values @ b.values

    def bw(g):
        return g @ b.values.T, a.values.T @ g

    return _make("matmul", out, (a, b), bw)


def bmm(a, b) -> Tensor:
    """Batched matrix multiply on 3-D operands (B,m,k) @ (B,k,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 3 or b.values.ndim != 3:
        raise ShapeMismatch(f"bmm: expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = a.values @ b.values

    def bw(g):
        return g @ b.values.transpose(0, 2, 1), a.values.transpose(0, 2, 1) @ g

    return _make("bmm", out, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.values.ndim)))
    out = np.transpose(a.values, perm)
    inverse = np.argsort(perm)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.values.reshape(tuple(shape))

    def bw(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatch("concat: needs at least one tensor")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, bw)


def gather_rows(a, index) -> Tensor:
    """Select rows of ``a`` (leading axis) by an integer index vector."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch(f"gather_rows: index must be a 1-D integer array, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.values[idx]

    def bw(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make("gather_rows", out, (a,), bw)


def add_bias(a, bias) -> Tensor:
    """Add a ``(d,)`` bias row to every row of an ``(..., d)`` tensor."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if bias.values.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"add_bias: incompatible shapes {a.shape} and {bias.shape}")
    out = a.values + bias.values

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return _make("add_bias", out, (a, bias), bw)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def _reduced_shape(shape: tuple[int, ...], axis: int | None) -> tuple[int, ...]:
    if axis is None:
        return ()
    return shape[:axis] + shape[axis + 1 :]


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(a.values, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def tmean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.values.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(a.values, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), bw)


def tmax(a, axis: int) -> Tensor:
    """Max over one axis. Gradient routes to the lowest-index maximizer."""
    a = _as_tensor(a)
    arg = np.argmax(a.values, axis=axis)
    out = np.take_along_axis(a.values, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        acc = np.zeros_like(a.values)
        np.put_along_axis(acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (acc,)

    return _make("max", out, (a,), bw)


def logsumexp(a, axis: int) -> Tensor:
    """Numerically stable log(sum(exp(a))) over one axis."""
    a = _as_tensor(a)
    m = np.max(a.values, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.values - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    softmax = shifted / total

    def bw(g):
        return (np.expand_dims(g, axis) * softmax,)

    return _make("logsumexp", out, (a,), bw)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Scale each row of an (N,d) tensor to unit length; rows with norm
    below ``eps`` are scaled by 1/eps instead of dividing by zero."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows: expects 2-D input, got {a.shape}")
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.values / denom
    small = norms <= eps

    def bw(g):
        # d(x/n)/dx = I/n - x x^T / n^3; degenerate rows fall back to 1/eps scaling
        dot = (g * a.values).sum(axis=1, keepdims=True)
        ga = g / denom - a.values * (dot / denom**3)
        return (np.where(small, g / eps, ga),)

    return _make("l2_normalize_rows", out, (a,), bw)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class CheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    tolerance: float
    passed: bool
    failure: str | None = None
    worst: tuple[int, int] = (-1, -1)  # (tensor index, flat coordinate)
    details: list[str] = field(default_factory=list)


def grad_check(
    fn: Callable[..., Tensor],
    points: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> CheckReport:
    """Compare tape gradients of ``fn(*points)`` against central differences.

    ``points`` must be float64 leaves; their values are perturbed in place and
    restored. The relative error per coordinate is |g_tape - g_fd| divided by
    max(1, |g_tape|, |g_fd|).
    """
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for t in points:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 points")
        if not t.requires_grad:
            raise ValueError("grad_check points must require gradients")

    saved = [t.grad for t in points]
    for t in points:
        t.grad = None
    with Tape():
        try:
            out = fn(*points)
        except (DomainError, FloatingPointError) as e:
            return CheckReport(np.inf, tolerance, False, failure=f"base point: {e}")
        if out.size != 1:
            raise ShapeMismatch("grad_check: fn must return a scalar")
        if not np.isfinite(out.values).all():
            return CheckReport(np.inf, tolerance, False, failure="non-finite value at base point")
        backward(out)
    tape_grads = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in points]
    for t, g in zip(points, saved):
        t.grad = g

    def evaluate() -> float:
        result = fn(*points)
        return float(result.values.reshape(-1)[0])

    max_err = 0.0
    worst = (-1, -1)
    details: list[str] = []
    for ti, t in enumerate(points):
        flat = t.values.reshape(-1)
        for ci in range(flat.size):
            original = flat[ci]
            try:
                flat[ci] = original + step
                f_plus = evaluate()
                flat[ci] = original - step
                f_minus = evaluate()
            except (DomainError, FloatingPointError):
                f_plus = f_minus = np.nan
            finally:
                flat[ci] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return CheckReport(
                    np.inf, tolerance, False,
                    failure=f"non-finite value near tensor {ti} coordinate {ci}",
                    worst=(ti, ci),
                )
            fd = (f_plus - f_minus) / (2.0 * step)
            tg = tape_grads[ti].reshape(-1)[ci]
            err = abs(tg - fd) / max(1.0, abs(tg), abs(fd))
            if err > max_err:
                max_err = err
                worst = (ti, ci)
            if err > tolerance:
                details.append(f"tensor {ti} coord {ci}: tape={tg:.9g} fd={fd:.9g} err={err:.3g}")
    return CheckReport(max_err, tolerance, max_err <= tolerance, worst=worst, details=details[:8])
