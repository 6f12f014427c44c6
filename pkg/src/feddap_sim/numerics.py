"""Dense vector primitives and the scalar kernels shared by the other modules.

Vectors and matrices are plain float64 numpy arrays. Functions never mutate
their inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# below this norm a vector is treated as zero in cosine()
ZERO_NORM = 1e-12


def as_vec(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def cosine(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]; 0.0 if either vector is zero."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosines between rows of A (n, k) and rows of B (m, k).

    Same zero-norm and clamping conventions as :func:`cosine`.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    dots = A @ B.T
    ok = (na >= ZERO_NORM)[:, None] & (nb >= ZERO_NORM)[None, :]
    out = np.zeros_like(dots)
    out[ok] = dots[ok] / np.outer(na, nb)[ok]
    return np.clip(out, -1.0, 1.0)


def softmax_temp(scores, tau: float) -> np.ndarray:
    """Softmax of ``scores / tau`` with max-subtraction."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("softmax_temp needs at least one score")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = s / tau
    t = t - t.max()
    e = np.exp(t)
    return e / e.sum()


def logsumexp(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def matvec(M, v) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    v = as_vec(v)
    if M.ndim != 2 or M.shape[1] != v.shape[0]:
        raise ValueError(f"cannot multiply {M.shape} matrix by length-{v.shape[0]} vector")
    return M @ v


def vec_add(a, b) -> np.ndarray:
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a + b


def vec_scale(a, k: float) -> np.ndarray:
    return as_vec(a) * float(k)


def vec_mean(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("vec_mean of an empty list")
    stacked = np.stack([as_vec(v) for v in vectors])
    return stacked.mean(axis=0)
