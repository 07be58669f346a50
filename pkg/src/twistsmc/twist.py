"""Twist functions: log-domain multiplicative corrections to the base chain.

A twist maps (x_t, t) to log psi_t(x_t). Three realizations:

- ExactTwist: table lookup backed by the enumeration oracle.
- McTwist: Monte-Carlo estimate from M reverse-chain completions; each
  evaluation charges M reward calls to the ledger.
- LearnedTwist: a small feed-forward head on pooled sequence features;
  evaluation costs zero reward calls, which is the whole point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import nn
from .diffusion import Denoiser, NoiseSchedule, Vocab, sample_reverse_batch
from .oracle import ExactOracle
from .rewards import RewardFn
from .util import logsumexp


class TwistFn(Protocol):
    def log_psi(self, x_t: np.ndarray, t: int) -> float: ...

    def log_psi_batch(self, xs: np.ndarray, t: int) -> np.ndarray: ...


class ConstantTwist:
    """log psi identically equal to a constant (0 recovers the base chain)."""

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def log_psi(self, x_t, t):
        return self.value

    def log_psi_batch(self, xs, t):
        return np.full(np.asarray(xs).shape[0], self.value)


class ExactTwist:
    """Optimal twist via the enumeration oracle; tables built eagerly."""

    def __init__(self, oracle: ExactOracle, r: RewardFn, beta: float):
        self.oracle = oracle
        self.r = r
        self.beta = beta
        oracle._log_twist_table(r, beta)  # build now so sampling stays ledger-clean

    def log_psi(self, x_t: np.ndarray, t: int) -> float:
        return self.oracle.exact_log_twist(self.r, self.beta, t, x_t)

    def log_psi_batch(self, xs: np.ndarray, t: int) -> np.ndarray:
        return self.oracle.log_twist_batch(self.r, self.beta, t, xs)


@dataclass
class McTwistConfig:
    M: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


class McTwist:
    """Monte-Carlo twist: average of exp(r/beta) over M chain completions.

    log_psi(x_t, t) rolls M independent reverse-chain completions from step t
    down to 0 and returns logsumexp_m(r(x0_m)/beta) - log M. The estimate is
    unbiased in the linear domain and exact as M grows. Each call adds
    exactly M reward evaluations per sequence to the ledger.
    """

    def __init__(self, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
                 cfg: McTwistConfig):
        self.den = den
        self.sched = sched
        self.r = r
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def log_psi(self, x_t: np.ndarray, t: int) -> float:
        return float(self.log_psi_batch(np.asarray(x_t)[None, :], t)[0])

    def log_psi_batch(self, xs: np.ndarray, t: int) -> np.ndarray:
        xs = np.asarray(xs)
        B, M = xs.shape[0], self.cfg.M
        tiled = np.repeat(xs, M, axis=0)
        x0 = sample_reverse_batch(self.den, self.sched, tiled, t, 0, self.rng)
        rewards = self.r.batch(x0).reshape(B, M)
        return logsumexp(rewards / self.cfg.beta, axis=1) - np.log(M)


def mc_log_twist(x_t: np.ndarray, t: int, den: Denoiser, sched: NoiseSchedule,
                 r: RewardFn, cfg: McTwistConfig,
                 rng: np.random.Generator | None = None) -> float:
    """One-shot Monte-Carlo twist estimate (see McTwist for the conventions)."""
    mc = McTwist(den, sched, r, cfg)
    if rng is not None:
        mc.rng = rng
    return mc.log_psi(x_t, t)


def twist_features(xs: np.ndarray, t: int, vocab: Vocab, T: int) -> np.ndarray:
    """Pooled features for the learned head, shape (B, V+2).

    Mean-pooled one-hot over the V+1 symbols (the per-symbol occupancy
    fractions, mask included) with t/T appended. All values lie in [0, 1].
    """
    xs = np.asarray(xs)
    eye = np.eye(vocab.size + 1)
    pooled = eye[xs].mean(axis=1)
    time_col = np.full((xs.shape[0], 1), t / T)
    return np.concatenate([pooled, time_col], axis=1)


def feature_dim(vocab: Vocab) -> int:
    return vocab.size + 2


class LearnedTwist:
    """Scalar feed-forward head predicting log psi from pooled features.

    The head predicts in the log domain for numerical stability; a freshly
    initialized head outputs exactly 0 (twist = 1), so sampling starts at the
    untwisted base distribution.
    """

    def __init__(self, vocab: Vocab, T: int, spec: nn.MlpSpec, params: np.ndarray):
        if spec.input_dim != feature_dim(vocab) or spec.output_dim != 1:
            raise ValueError(
                f"head must map {feature_dim(vocab)} features to 1 output, got {spec}")
        self.vocab = vocab
        self.T = T
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, vocab: Vocab, T: int, hidden: tuple[int, ...] = (64, 64),
               rng: np.random.Generator | None = None) -> "LearnedTwist":
        spec = nn.MlpSpec(input_dim=feature_dim(vocab), hidden=tuple(hidden), output_dim=1)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(vocab, T, spec, nn.init_params(spec, rng))

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocab, T: int) -> "LearnedTwist":
        spec, params, _step = nn.load_checkpoint(path)
        return cls(vocab, T, spec, params)

    def features(self, xs: np.ndarray, t: int) -> np.ndarray:
        return twist_features(xs, t, self.vocab, self.T)

    def log_psi(self, x_t: np.ndarray, t: int) -> float:
        return float(self.log_psi_batch(np.asarray(x_t)[None, :], t)[0])

    def log_psi_batch(self, xs: np.ndarray, t: int) -> np.ndarray:
        return nn.forward_batch(self.spec, self.params, self.features(xs, t))[:, 0]

    def grad_log_psi_batch(self, xs: np.ndarray, t: int,
                           coeffs: np.ndarray) -> np.ndarray:
        """Gradient of sum_i coeffs[i] * log_psi(xs[i], t) w.r.t. the flat params."""
        cot = np.asarray(coeffs, dtype=np.float64)[:, None]
        return nn.backward_batch(self.spec, self.params, self.features(xs, t), cot)


def learned_log_twist(head: LearnedTwist, x_t: np.ndarray, t: int) -> float:
    return head.log_psi(x_t, t)


def exact_twist_fn(oracle: ExactOracle, r: RewardFn, beta: float) -> ExactTwist:
    return ExactTwist(oracle, r, beta)


def make_twist(spec: str, *, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
               beta: float, oracle: ExactOracle | None = None, seed: int = 0):
    """Build a twist from a CLI-style spec: "exact" | "mc:M" | "learned:path"."""
    kind, _, arg = spec.partition(":")
    if kind == "exact":
        if oracle is None:
            oracle = ExactOracle(den, sched)
        return ExactTwist(oracle, r, beta)
    if kind == "mc":
        return McTwist(den, sched, r, McTwistConfig(M=int(arg), beta=beta, seed=seed))
    if kind == "learned":
        return LearnedTwist.from_checkpoint(arg, den.vocab, sched.T)
    raise ValueError(f"unknown twist {spec!r}")
