"""Shared numerical primitives: softmax/entropy, cosine geometry, exact k-NN,
least squares, and seeded randomness helpers.

All arithmetic is float64. Ranking ties break toward the lower index so that
repeated runs are bit-for-bit reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

Array = np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream."""
    return np.random.default_rng(seed)


def derive_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent stream keyed by (seed, tag); stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


def derive_seed(seed: int, tag: str) -> int:
    """Stable derived integer seed for nested configs."""
    ss = np.random.SeedSequence([seed, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def softmax(logits: Array) -> Array:
    """Row-wise softmax with the max-subtraction trick; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: Array) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("log_softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(p: Array) -> float:
    """Shannon entropy in nats of a probability vector; 0*log0 treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("entropy expects a nonempty vector")
    if np.any(p < 0):
        raise ValueError("entropy input has a negative entry")
    s = float(p.sum())
    if abs(s - 1.0) > 1e-6:
        raise ValueError(f"entropy input sums to {s:.9g}, expected 1")
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return max(0.0, float(-terms.sum()))


def cosine_similarity(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    v = float(a @ b / (na * nb))
    return min(1.0, max(-1.0, v))


def l2_normalize_rows(m: Array) -> Array:
    """Unit-normalize each row; raises naming the first zero row."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("l2_normalize_rows expects a matrix")
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot normalize zero row {int(zero[0])}")
    return m / norms[:, None]


def knn_indices(m: Array, k: int, metric: str = "cosine") -> Array:
    """Exact k nearest neighbors per row, self excluded.

    Returns an (n, k) int array ordered by decreasing similarity; ties break
    toward the lower index. Brute force, no approximate indexing.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("knn_indices expects a matrix")
    n = m.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={n}")
    if metric == "cosine":
        u = l2_normalize_rows(m)
        sims = u @ u.T
    elif metric == "euclidean":
        sq = (m * m).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (m @ m.T)
        sims = -d2
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(sims, -np.inf)
    # stable sort keeps the lower original index first among equal similarities
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def least_squares(x: Array, y: Array) -> Array:
    """Minimum-norm OLS coefficients; rejects rank-deficient designs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2:
        raise ValueError("least_squares expects a 2-d design matrix")
    n, p = x.shape
    if y.shape[0] != n:
        raise ValueError("design and response row counts differ")
    if n < p:
        raise ValueError(f"need at least p={p} rows, got {n}")
    if np.linalg.matrix_rank(x) < p:
        raise ValueError("rank-deficient design matrix")
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    return beta


def logsumexp(z: Array, axis: int = 0) -> Array:
    """Stable log-sum-exp along an axis."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(z - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def one_hot(labels: Array, num_classes: int) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range for one_hot")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
