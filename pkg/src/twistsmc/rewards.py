"""Deterministic reward functions on clean sequences, with call accounting.

Every evaluation is counted on the reward object itself; the counter is the
quantity that twist learning amortizes away, so samplers and training loops
assert against it. An optional simulated per-call latency (milliseconds)
models expensive rewards without actually sleeping.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .diffusion import Vocab


class RewardFn:
    """Pure map from clean sequences to scalars, plus a call ledger.

    `fn` must accept an (B, N) integer array and return (B,) floats. Masked
    input is rejected. `calls` counts individual sequence evaluations;
    `simulated_ms` is calls * latency_ms.
    """

    def __init__(self, name: str, fn: Callable[[np.ndarray], np.ndarray],
                 vocab: Vocab, latency_ms: float = 0.0):
        self.name = name
        self.vocab = vocab
        self.latency_ms = float(latency_ms)
        self._fn = fn
        self.calls = 0

    @property
    def simulated_ms(self) -> float:
        return self.calls * self.latency_ms

    def reset_ledger(self) -> None:
        self.calls = 0

    def __call__(self, x: np.ndarray) -> float:
        return float(self.batch(np.asarray(x)[None, :])[0])

    def batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs)
        if xs.ndim != 2:
            raise ValueError(f"expected (B, N) batch, got shape {xs.shape}")
        if np.any(xs >= self.vocab.size) or np.any(xs < 0):
            raise ValueError("reward evaluated on a masked or out-of-range sequence")
        self.calls += xs.shape[0]
        out = np.asarray(self._fn(xs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"reward {self.name!r} produced non-finite values")
        return out


def token_count(vocab: Vocab, target_token: int) -> RewardFn:
    """Fraction of positions equal to target_token, in [0, 1]."""
    if not 0 <= target_token < vocab.size:
        raise ValueError(f"target token {target_token} outside vocab")
    return RewardFn(f"token_count:{target_token}",
                    lambda xs: (xs == target_token).mean(axis=1), vocab)


def pattern_match(vocab: Vocab, target_seq: np.ndarray) -> RewardFn:
    """Negative normalized Hamming distance to target_seq, in [-1, 0]."""
    target = np.asarray(target_seq)
    if np.any(target >= vocab.size):
        raise ValueError("target sequence contains mask tokens")
    name = "pattern_match:" + "-".join(map(str, target))
    return RewardFn(name, lambda xs: -(xs != target).mean(axis=1), vocab)


def motif_count(vocab: Vocab, k_gram: np.ndarray) -> RewardFn:
    """Number of (possibly overlapping) occurrences of k_gram."""
    gram = np.asarray(k_gram)
    if gram.ndim != 1 or len(gram) < 1:
        raise ValueError("k_gram must be a nonempty 1-D sequence")
    if np.any(gram >= vocab.size):
        raise ValueError("k_gram contains mask tokens")
    k = len(gram)

    def fn(xs: np.ndarray) -> np.ndarray:
        n = xs.shape[1]
        if n < k:
            return np.zeros(xs.shape[0])
        hits = np.ones((xs.shape[0], n - k + 1), dtype=bool)
        for j in range(k):
            hits &= xs[:, j : j + n - k + 1] == gram[j]
        return hits.sum(axis=1).astype(np.float64)

    return RewardFn("motif_count:" + "-".join(map(str, gram)), fn, vocab)


def with_latency(r: RewardFn, ms: float) -> RewardFn:
    """Same values as `r`, fresh ledger, `ms` simulated milliseconds per call."""
    return RewardFn(r.name, r._fn, r.vocab, latency_ms=ms)


def eval_batch(r: RewardFn, seqs: np.ndarray) -> tuple[np.ndarray, float]:
    """Evaluate a batch and return (values, simulated cost in ms for the batch)."""
    values = r.batch(seqs)
    return values, len(values) * r.latency_ms


def make_reward(spec: str, vocab: Vocab, latency_ms: float = 0.0) -> RewardFn:
    """Build a reward from a CLI-style spec string.

    Formats: "token_count:T", "pattern_match:a-b-c", "motif_count:a-b".
    """
    kind, _, arg = spec.partition(":")
    if kind == "token_count":
        r = token_count(vocab, int(arg))
    elif kind == "pattern_match":
        r = pattern_match(vocab, np.array([int(s) for s in arg.split("-")]))
    elif kind == "motif_count":
        r = motif_count(vocab, np.array([int(s) for s in arg.split("-")]))
    else:
        raise ValueError(f"unknown reward {spec!r}")
    if latency_ms:
        r = with_latency(r, latency_ms)
    return r
