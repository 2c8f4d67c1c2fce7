"""Numeric primitives shared across the package.

Everything here works on float64 numpy arrays. Functions that take a single
probability vector also accept a 2-D batch (rows are examples) unless noted.
"""

from __future__ import annotations

import numpy as np

#: Lower clamp applied to probabilities before taking a log.
LOG_EPS = 1e-12

#: Bit generator used for every random stream in the package.
RNG_ALGORITHM = "philox4x64"


class DomainError(ValueError):
    """Raised for non-finite numeric input."""


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class ConfigError(ValueError):
    """Raised for an out-of-range configuration value."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for ``(seed, stream)``.

    Philox is counter based, so the draws depend only on the key and not on
    platform word size or previous library state.
    """
    if seed < 0 or stream < 0:
        raise ConfigError("seed and stream must be nonnegative")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ShapeError(f"labels must lie in [0, {K})")
    return np.eye(K, dtype=np.float64)[labels]


def is_simplex(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2 or not np.all(np.isfinite(p)):
        return False
    return bool(np.all(p >= 0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol))


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax input contains NaN or Inf")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def cross_entropy_soft(pred, target):
    """``-sum_k target_k * log(pred_k)`` with ``pred`` clamped at ``LOG_EPS``.

    Argument order is (prediction, target); the target supplies the weights.
    Returns a float for 1-D input and a vector for a batch.
    """
    pred, target = _check_pair(pred, target)
    out = -(target * np.log(np.maximum(pred, LOG_EPS))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.maximum(p, LOG_EPS)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(from_, to):
    """KL(from || to). Terms with ``from_k == 0`` vanish; ``to`` is clamped."""
    p, q = _check_pair(from_, to)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, LOG_EPS))), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def sq_euclidean(a, b) -> float:
    a, b = _check_pair(a, b)
    d = a - b
    return float(d @ d)


def pairwise_sq_euclidean(X, C) -> np.ndarray:
    """Squared distances between rows of ``X`` (n, F) and rows of ``C`` (K, F)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if X.shape[1] != C.shape[1]:
        raise ShapeError(f"feature dims differ: {X.shape[1]} vs {C.shape[1]}")
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkf,nkf->nk", diff, diff)


def ema_smooth(series, ratio: float) -> np.ndarray:
    """Exponential moving average, seeded with the first value."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"EMA ratio must be in [0, 1), got {ratio}")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("ema_smooth needs a nonempty 1-D series")
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = ratio * out[t - 1] + (1.0 - ratio) * x[t]
    return out


def argmax_lowest(p) -> np.ndarray:
    """Row argmax; ``np.argmax`` already returns the first maximum on ties."""
    return np.argmax(np.asarray(p), axis=-1)
