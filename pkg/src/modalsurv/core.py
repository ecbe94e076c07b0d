"""Shared numeric primitives on plain numpy vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


class ZeroNormError(ValueError):
    """Raised when a vector with zero L2 norm must be normalized."""


class DimensionMismatchError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class GradientRecord:
    """A scalar value together with its partial derivatives.

    ``grads`` maps an input or parameter name to an array with the same shape
    as that input. ``flags`` carries non-fatal conditions raised while
    computing the value (e.g. a clamped logarithm).
    """

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise NonFiniteError(f"non-finite value {self.value}")
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")


def record_from_tensors(loss: Tensor, inputs: Mapping[str, Tensor], flags=None) -> GradientRecord:
    """Backpropagate ``loss`` and collect gradients of the named leaves."""
    loss.backward()
    grads = {}
    for name, t in inputs.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return GradientRecord(float(loss.data), grads, dict(flags or {}))


def _vec(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatchError(f"expected a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector has non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    v = _vec(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return v / norm


def cosine_similarity(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity is undefined for zero-norm vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def softmax_temperature(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = _vec(logits) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    point,
    eps: float = 1e-6,
) -> float:
    """Compare an analytic gradient against central differences.

    Returns ``max_k |analytic_k - numeric_k| / max(1, |numeric_k|)`` over all
    coordinates of ``point``. ``grad`` is either the analytic gradient at
    ``point`` or a callable producing it.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    analytic = np.asarray(grad(x.copy()) if callable(grad) else grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionMismatchError(f"gradient shape {analytic.shape} != point shape {x.shape}")
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x.copy())
        flat[k] = orig - eps
        fm = f(x.copy())
        flat[k] = orig
        numeric[k] = (fp - fm) / (2 * eps)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NonFiniteError("non-finite value encountered during gradient check")
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
