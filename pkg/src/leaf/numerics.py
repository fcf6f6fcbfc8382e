"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the dual-branch predictor and the ranking objective need
are provided.  Every differentiable operation appends a record to a
thread-local tape when any operand requires a gradient; :func:`backward`
replays that tape in exact reverse order and then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "ContractError",
    "NonFiniteError",
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "gradcheck",
    "huber",
    "huber_elementwise",
    "masked_min",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reciprocal",
    "relu",
    "reshape",
    "row_softmax",
    "scale",
    "sub",
    "sum",
    "take",
    "transpose",
]


class ContractError(ValueError):
    """Raised when an operation's shape or argument contract is violated."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


class Tensor:
    """A dense row-major float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, all routed through the taped functions below
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named learnable leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape for the duration of the block."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], adjoint: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(data, op)
    out.is_leaf = False
    out.name = None
    out.grad = None
    tape = current_tape()
    out.requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.records.append(_Record(out, inputs, adjoint))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes broadcast as in :func:`numpy.matmul`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ContractError(str(exc)) from exc

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(data, (a, b), adjoint, "matmul")


def _binary(a, b, op: str):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _binary(a, b, "mul")

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), adjoint, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    inv = 1.0 / a.data
    return _emit(inv, (a,), lambda g: (-g * inv * inv,), "reciprocal")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ContractError(str(exc)) from exc
    return _emit(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(np.sum(a.data, axis=axis), (a,), adjoint, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def relu(a) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def row_softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ContractError("row_softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (a,), adjoint, "row_softmax")


def huber_elementwise(r, delta: float) -> Tensor:
    """Pointwise Huber penalty of residuals ``r``."""
    r = _as_tensor(r)
    if delta <= 0:
        raise ContractError("huber delta must be positive")
    absr = np.abs(r.data)
    quad = absr <= delta
    data = np.where(quad, 0.5 * r.data**2, delta * (absr - 0.5 * delta))

    def adjoint(g):
        return (g * np.where(quad, r.data, delta * np.sign(r.data)),)

    return _emit(data, (r,), adjoint, "huber")


def huber(a, b, delta: float = 1.0, axis: int | None = None) -> Tensor:
    """Mean Huber loss between ``a`` and ``b``.

    With ``axis=None`` the mean runs over every element and the result is a
    scalar.  Otherwise ``a`` and ``b`` may broadcast and the mean is taken
    along ``axis`` only.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if axis is None and a.shape != b.shape:
        raise ContractError(f"huber shape mismatch: {a.shape} vs {b.shape}")
    return mean(huber_elementwise(sub(a, b), delta), axis)


def take(a, index: np.ndarray) -> Tensor:
    """Gather one entry per row along the last axis: ``out[..., ] = a[..., index[...]]``."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ContractError(f"take index shape {idx.shape} must equal {a.shape[:-1]}")
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def adjoint(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _emit(data, (a,), adjoint, "take")


def masked_min(a, allowed: np.ndarray) -> Tensor:
    """Minimum along the last axis over entries where ``allowed`` is true.

    Ties resolve to the first index, and the whole gradient goes there.
    """
    a = _as_tensor(a)
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != a.shape:
        raise ContractError("masked_min mask must match operand shape")
    if not allowed.any(axis=-1).all():
        raise ContractError("masked_min: some row has no allowed entries")
    masked = np.where(allowed, a.data, np.inf)
    idx = np.argmin(masked, axis=-1)
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def adjoint(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _emit(data, (a,), adjoint, "masked_min")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``; clears the tape."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar tensor")
    tape = current_tape()
    try:
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.adjoint(g)):
                if not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments persist across :meth:`step` calls."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad.fill(0.0)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare taped gradients of ``fn()`` with central differences.

    Returns the norm-wise relative error ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``
    per parameter, keyed by name (or position).
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    errors = {}
    with no_grad():
        for k, p in enumerate(params):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = fn().item()
                flat[j] = orig - h
                down = fn().item()
                flat[j] = orig
                nflat[j] = (up - down) / (2 * h)
            diff = np.linalg.norm(analytic[k] - numeric)
            denom = max(np.linalg.norm(analytic[k]), np.linalg.norm(numeric), 1e-12)
            errors[p.name or str(k)] = float(diff / denom)
    for p in params:
        p.zero_grad()
    return errors
