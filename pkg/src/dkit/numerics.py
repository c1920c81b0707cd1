"""Dense float64 primitives and a central-difference gradient checker.

Matrices are plain ``numpy`` float64 arrays in C (row-major) order; ``as_matrix``
validates the shape/finiteness contract at API boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonFiniteValue, NonPositiveTemperature, ShapeMismatch, ZeroNorm

NORM_EPS = 1e-12
REL_ERR_FLOOR = 1e-8


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got rank {m.ndim}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeMismatch(f"expected {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteValue("matrix has non-finite entries")
    return m


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < NORM_EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {n:g}")
    return v / n


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    c = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, c))


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    s = np.asarray(logits, dtype=np.float64) / tau
    s = s - s.max()
    p = np.exp(s)
    return p / p.sum()


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    s = np.asarray(logits, dtype=np.float64) / tau
    s = s - s.max()
    return s - np.log(np.exp(s).sum())


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    analytic: float
    numeric: float


def numeric_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return g.reshape(x.shape)


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x, step: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient returned by ``f`` against central differences.

    ``f(x)`` must return ``(value, gradient)``. Only the value is used for the
    numeric side, so the two routes stay independent.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NonFiniteValue("function or gradient is non-finite at x")
    numeric = numeric_gradient(lambda y: f(y)[0], x, step)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteValue("finite differences are non-finite near x")
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
    rel = np.abs(a - n) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    if not rel.size:
        return GradCheckReport(0.0, 0, 0.0, 0.0)
    return GradCheckReport(float(rel[worst]), worst, float(a[worst]), float(n[worst]))
