"""Dense rank-1/rank-2 tensors with a recorded-operation reverse-mode tape.

All numeric state in the package flows through :class:`Tensor`.  Operations
are free functions that take an optional :class:`Tape`; when a tape is given
the operation appends its backward rule, and :meth:`Tape.backward` replays the
rules in reverse execution order, accumulating gradients into every tensor
that influenced the scalar result.  Passing ``tape=None`` runs the identical
arithmetic without recording (inference mode).

Scalars are represented as rank-1 tensors of shape ``(1,)``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "LOG_FLOOR",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "apply_mask",
    "column",
    "cross_entropy",
    "grad_check",
    "matvec",
    "mul",
    "pointwise",
    "precision",
    "scale",
    "set_precision",
    "softmax",
]

# Probabilities are clamped to this floor before taking logs.
LOG_FLOOR = 1e-12

_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite arithmetic was required."""


def set_precision(kind: str) -> None:
    """Select the carrier dtype: ``"float64"`` (default) or ``"float32"``.

    Gradient checking is only reliable at float64; float32 exists as a fast
    mode for exploratory runs and is never used by the test suite.
    """
    global _DTYPE
    if kind == "float64":
        _DTYPE = np.float64
    elif kind == "float32":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision {kind!r}; use 'float64' or 'float32'")


def precision() -> str:
    return "float64" if _DTYPE is np.float64 else "float32"


class Tensor:
    """A rank-1 or rank-2 array of reals plus an optional gradient buffer.

    Tensors own their storage (the constructor copies).  ``grad`` starts as
    ``None`` and is allocated lazily the first time a backward rule touches
    the tensor; accumulated gradients always have the same shape as ``data``.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=_DTYPE)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"tensors are rank 1 or 2, got rank {arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: adopts the array without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, data={self.data!r})"


class Tape:
    """Ordered record of executed operations and their backward rules."""

    __slots__ = ("_rules",)

    def __init__(self) -> None:
        self._rules: list[Callable[[], None]] = []

    def record(self, rule: Callable[[], None]) -> None:
        self._rules.append(rule)

    def __len__(self) -> int:
        return len(self._rules)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay recorded rules in reverse.

        Gradients accumulate (+=) into ``.grad`` buffers, so running several
        backward passes without zeroing sums gradients — which is exactly
        what mini-batch accumulation wants.
        """
        if loss.shape != (1,):
            raise ShapeError(f"backward needs a scalar of shape (1,), got {loss.shape}")
        loss._grad_buffer()[...] = 1.0
        for rule in reversed(self._rules):
            rule()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branching form avoids overflow warnings for large-magnitude inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def matvec(m: Tensor, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix-vector product ``m @ x`` for a rank-2 ``m`` and rank-1 ``x``."""
    if m.data.ndim != 2 or x.data.ndim != 1 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shapes do not align: {m.shape} @ {x.shape}")
    out = Tensor._wrap(m.data @ x.data)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            m._grad_buffer()[...] += np.outer(g, x.data)
            x._grad_buffer()[...] += m.data.T @ g

        tape.record(rule)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            a._grad_buffer()[...] += g
            b._grad_buffer()[...] += g

        tape.record(rule)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise (Hadamard) product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            a._grad_buffer()[...] += g * b.data
            b._grad_buffer()[...] += g * a.data

        tape.record(rule)
    return out


def scale(x: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    """Multiply a tensor by a python scalar constant."""
    out = Tensor._wrap(x.data * k)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            x._grad_buffer()[...] += g * k

        tape.record(rule)
    return out


def apply_mask(x: Tensor, mask: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Elementwise product with a constant array (dropout masks).

    The mask is data, not a learned tensor: no gradient is tracked for it.
    """
    if x.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor {x.shape}")
    out = Tensor._wrap(x.data * mask)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            x._grad_buffer()[...] += g * mask

        tape.record(rule)
    return out


def column(m: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Select column ``index`` of a rank-2 tensor as a rank-1 tensor.

    Equivalent to ``matvec(m, onehot(index))``; used for embedding lookup.
    """
    if m.data.ndim != 2:
        raise ShapeError(f"column needs a rank-2 tensor, got shape {m.shape}")
    if not 0 <= index < m.shape[1]:
        raise IndexError(f"column {index} out of range for shape {m.shape}")
    out = Tensor._wrap(m.data[:, index].copy())
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            m._grad_buffer()[:, index] += g

        tape.record(rule)
    return out


def pointwise(kind: str, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Apply ``tanh`` or ``sigmoid`` elementwise."""
    if kind == "tanh":
        y = np.tanh(x.data)
    elif kind == "sigmoid":
        y = _sigmoid(x.data)
    else:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    out = Tensor._wrap(y)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            if kind == "tanh":
                x._grad_buffer()[...] += g * (1.0 - y * y)
            else:
                x._grad_buffer()[...] += g * y * (1.0 - y)

        tape.record(rule)
    return out


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Max-subtracted softmax over a rank-1 tensor."""
    if x.data.ndim != 1:
        raise ShapeError(f"softmax needs a rank-1 tensor, got shape {x.shape}")
    shifted = x.data - np.max(x.data)
    e = np.exp(shifted)
    y = e / np.sum(e)
    out = Tensor._wrap(y)
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            x._grad_buffer()[...] += y * (g - np.dot(g, y))

        tape.record(rule)
    return out


def cross_entropy(pred: Tensor, target: int, tape: Tape | None = None) -> Tensor:
    """Negative log-probability of ``target`` under distribution ``pred``.

    ``pred`` must be a rank-1 distribution summing to 1 within 1e-6; the
    selected probability is clamped to :data:`LOG_FLOOR` before the log, so
    the result is always finite.  Returns a scalar tensor of shape ``(1,)``.
    """
    if pred.data.ndim != 1:
        raise ShapeError(f"cross_entropy needs a rank-1 tensor, got shape {pred.shape}")
    if not 0 <= target < pred.shape[0]:
        raise IndexError(f"target {target} out of range for distribution of size {pred.shape[0]}")
    total = float(np.sum(pred.data))
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"cross_entropy input sums to {total!r}, not a distribution")
    p = float(pred.data[target])
    out = Tensor._wrap(np.array([-np.log(max(p, LOG_FLOOR))], dtype=pred.data.dtype))
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            if p > LOG_FLOOR:
                pred._grad_buffer()[target] += -g[0] / p
            # below the floor the clamped loss is locally constant

        tape.record(rule)
    return out


def grad_check(
    f: Callable[[Tape | None], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f(tape)`` must rebuild its computation from scratch on every call and
    return a scalar tensor; it may close over ``params``.  For every
    coordinate of every parameter the relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` and the
    maximum over all coordinates is returned.
    """
    for t in params.values():
        t.zero_grad()
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)

    analytic: dict[str, np.ndarray] = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite analytic gradient for parameter {name!r}")
        analytic[name] = g.copy()
        t.zero_grad()

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(None).data[0])
            flat[i] = orig - eps
            lo = float(f(None).data[0])
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite loss while perturbing parameter {name!r}")
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ga[i] - numeric) / denom)
    return worst
