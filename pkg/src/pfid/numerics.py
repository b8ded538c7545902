"""Numerically stable primitives shared by the losses and the evaluation code.

Everything here works in float64.  Probability vectors are plain numpy
arrays; :func:`as_prob_dist` checks the invariants when a caller wants them
enforced.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Probabilities are clamped to [EPS, 1] before any logarithm.
EPS = 1e-12


def as_prob_dist(p, atol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector (or a stack of them, one per row)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError(f"a distribution needs at least 2 classes, got {p.shape[-1]}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be finite and non-negative")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("probabilities must sum to 1")
    return p


def _check_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ValueError("logits need at least 2 entries along the last axis")
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))
        raise ValueError(f"non-finite logits at positions {bad.tolist()[:5]}")
    return z


def softmax(logits) -> np.ndarray:
    """Row-wise softmax over the last axis, shifted by the max for stability."""
    z = _check_logits(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _check_logits(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q) -> np.ndarray | float:
    """KL(p || q) in nats along the last axis.

    Both arguments are clamped to ``[EPS, 1]`` first, so a zero entry in ``p``
    contributes (numerically) nothing and a zero in ``q`` stays finite.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    pc = np.clip(p, EPS, 1.0)
    qc = np.clip(q, EPS, 1.0)
    kl = np.sum(pc * (np.log(pc) - np.log(qc)), axis=-1)
    # clamping can push identical inputs a hair below zero
    kl = np.maximum(kl, 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def l2_normalize(v) -> np.ndarray:
    """Scale a vector (or every row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        rows = np.flatnonzero(~(norms.ravel() > 0))
        raise ValueError(f"cannot normalize zero or non-finite vector(s): rows {rows.tolist()[:10]}")
    return v / norms


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(u @ v, -1.0, 1.0))


def similarity_matrix(a, b) -> np.ndarray:
    """All-pairs cosine similarity between rows of two unit-norm matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(a @ b.T, -1.0, 1.0)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` may have any shape; the result has the same shape.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
