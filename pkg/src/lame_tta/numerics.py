"""Shared numeric primitives: simplex vectors, stable softmax, divergences.

Everything here runs at 64-bit precision. Reductions that downstream code
relies on for reproducibility are computed in a value-canonical order
(summands sorted before a fixed reduction tree, or correctly rounded via
``math.fsum``), which makes results invariant to permutations of the
operands and bitwise reproducible across runs and worker counts.
"""

from __future__ import annotations

import math

import numpy as np

SIMPLEX_ATOL = 1e-9
PROB_FLOOR = 1e-12


def exact_sum(values) -> float:
    """Correctly rounded sum of floats; invariant to operand order."""
    return math.fsum(values)


def exact_rowsums(x: np.ndarray) -> np.ndarray:
    """Correctly rounded per-row sums of a 2-D array."""
    return np.array([math.fsum(row) for row in np.asarray(x, dtype=float)])


def sorted_rowsums(x: np.ndarray) -> np.ndarray:
    """Per-row sums over value-sorted operands along the last axis.

    Cheaper than :func:`exact_rowsums` and still order-canonical, which is
    what the solver needs for permutation-equivariant iteration.
    """
    return np.sort(x, axis=-1).sum(axis=-1)


def simplex_vector(entries) -> np.ndarray:
    """Validate and construct a probability vector.

    Entries must be finite, nonnegative, and sum to 1 within
    ``SIMPLEX_ATOL``. The result is renormalized by its exact sum; this is
    the only place renormalization happens (never silently downstream).
    """
    v = np.asarray(entries, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("simplex vector must be a non-empty 1-D array")
    if not np.all(np.isfinite(v)):
        raise ValueError("simplex vector entries must be finite")
    if np.any(v < 0):
        raise ValueError("simplex vector entries must be nonnegative")
    total = exact_sum(v)
    if abs(total - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"entries sum to {total!r}, expected 1 within {SIMPLEX_ATOL}")
    if total != 1.0:
        v = v / total
    return v


def is_simplex(v: np.ndarray, atol: float = SIMPLEX_ATOL) -> bool:
    v = np.asarray(v, dtype=float)
    return (
        v.ndim == 1
        and bool(np.all(np.isfinite(v)))
        and bool(np.all(v >= -atol))
        and bool(np.all(v <= 1.0 + atol))
        and abs(exact_sum(v) - 1.0) <= atol
    )


def softmax(logits) -> np.ndarray:
    """Stable softmax of a single score vector (max-subtraction)."""
    z = np.asarray(logits, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("softmax expects a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    u = np.exp(z - z.max())
    return u / exact_sum(u)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of an (N, K) score matrix."""
    z = np.asarray(logits, dtype=float)
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError("softmax_rows expects a 2-D (N, K) array")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_rows input must be finite")
    u = np.exp(z - z.max(axis=1, keepdims=True))
    return u / sorted_rowsums(u)[:, None]


def kl_divergence(p, q) -> float:
    """KL(p || q) with the 0*log(0) := 0 convention.

    Returns ``inf`` when q has zero mass somewhere p has positive mass;
    callers that cannot tolerate that must clamp q beforehand.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return exact_sum(p[mask] * np.log(p[mask] / q[mask]))


def entropy(p) -> float:
    """Shannon entropy (nats) with 0*log(0) := 0."""
    p = np.asarray(p, dtype=float)
    mask = p > 0
    return -exact_sum(p[mask] * np.log(p[mask]))


def entropy_rows(P: np.ndarray) -> np.ndarray:
    """Row-wise entropies of an (N, K) matrix of probability rows."""
    P = np.asarray(P, dtype=float)
    terms = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    return -sorted_rowsums(terms)


def pairwise_sq_distances(features: np.ndarray) -> np.ndarray:
    """Matrix of squared Euclidean distances between feature rows.

    Exactly symmetric with an exactly zero diagonal; entries clipped at 0
    against Gram-trick rounding.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("features must be a non-empty (N, d) matrix")
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    D = (D + D.T) / 2.0
    np.clip(D, 0.0, None, out=D)
    np.fill_diagonal(D, 0.0)
    return D
