"""Small numeric helpers shared across the package."""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Stable log(sum(exp(a))) that tolerates -inf entries.

    Returns -inf when every entry along the reduction is -inf.
    """
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_normalize(log_w: np.ndarray) -> np.ndarray:
    """Normalize log weights so that logsumexp of the result is 0."""
    total = logsumexp(log_w)
    if total == NEG_INF:
        raise ValueError("cannot normalize: all log weights are -inf")
    return log_w - total


def safe_log(p: np.ndarray) -> np.ndarray:
    """Elementwise log with log(0) = -inf and no warning noise."""
    with np.errstate(divide="ignore"):
        return np.log(p)


def sample_categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row from row-wise categorical distributions.

    probs has shape (..., C); the trailing axis must sum to 1. Returns an
    integer array of shape probs.shape[:-1].
    """
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = np.sum(cdf < u, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def spawn_rng(seed: int, *tags: int) -> np.random.Generator:
    """Deterministically derive an independent generator from (seed, tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))
