"""Oblique projection onto the switching domain.

The domain at a fixed state is Q = {y : y^i >= max_j (y^j - c^{ij})}.
Its projection is the componentwise max P^i(y) = max_j (y^j - c^{ij});
under the cost structure condition one pass lands inside Q, so the
operator never iterates.
"""
from __future__ import annotations

import numpy as np

__all__ = ["project", "project_batch", "is_in_domain", "argmax_regime", "lipschitz_witness"]


def project(cost_matrix, y) -> np.ndarray:
    """Project one vector: P^i(y) = max_j (y^j - c^{ij})."""
    C = np.asarray(cost_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    if C.shape != (d, d):
        raise ValueError(f"cost matrix shape {C.shape} does not match y dimension {d}")
    return np.max(y[np.newaxis, :] - C, axis=1)


def project_batch(cost_matrices, y) -> np.ndarray:
    """Vectorized projection: cost (N, d, d), y (N, d) -> (N, d)."""
    C = np.asarray(cost_matrices, dtype=float)
    y = np.asarray(y, dtype=float)
    if C.ndim != 3 or y.ndim != 2 or C.shape[:2] != (y.shape[0], y.shape[1]):
        raise ValueError(f"incompatible shapes: cost {C.shape}, y {y.shape}")
    return np.max(y[:, np.newaxis, :] - C, axis=2)


def is_in_domain(cost_matrix, y) -> bool:
    """True iff y^i >= max_j (y^j - c^{ij}) for every i."""
    C = np.asarray(cost_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    if C.shape != (y.shape[-1],) * 2:
        raise ValueError(f"cost matrix shape {C.shape} does not match y dimension {y.shape[-1]}")
    return bool(np.all(y >= project(C, y)))


def argmax_regime(cost_row, y, exclude: int | None = None) -> int:
    """Smallest index attaining max_j (y^j - cost_row[j]), optionally excluding one.

    The smallest-index tie-break keeps strategy extraction deterministic.
    """
    vals = np.asarray(y, dtype=float) - np.asarray(cost_row, dtype=float)
    if exclude is not None:
        vals = vals.copy()
        vals[exclude] = -np.inf
    return int(np.argmax(vals))


def lipschitz_witness(d: int, cost_matrix):
    """Pair of vectors attaining the projection's sqrt(d) Lipschitz bound.

    Returns (y1, y2, ratio) with y1 = (max c, 0, ..., 0) and y2 shifted by
    one in the first coordinate; the ratio |P(y1)-P(y2)| / |y1-y2| equals
    sqrt(d) exactly for this pair.  Rejected for d = 1 where the
    projection is the identity.
    """
    if d < 2:
        raise ValueError("no witness in dimension 1: the projection is the identity")
    C = np.asarray(cost_matrix, dtype=float)
    if C.shape != (d, d):
        raise ValueError(f"cost matrix shape {C.shape} does not match d={d}")
    top = float(np.max(C))
    y1 = np.zeros(d)
    y2 = np.zeros(d)
    y1[0] = top
    y2[0] = top + 1.0
    num = float(np.linalg.norm(project(C, y1) - project(C, y2)))
    den = float(np.linalg.norm(y1 - y2))
    return y1, y2, num / den
