"""Exact ground truth on enumerable state spaces.

Everything here is dynamic programming over the full enumeration of
(V+1)^N noisy states: exact time marginals of the base reverse chain, the
exact value function / twist, reward-tilted target distributions, the
clean-sample forward decomposition of the target, and divergences between
distribution tables. All probability arithmetic runs in the log domain
because exp(r/beta) spans many orders of magnitude at small beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    DEFAULT_STATE_CAP,
    Denoiser,
    NoiseSchedule,
    StateSpaceTooLarge,
    Vocab,
    encode_states,
    enumerate_states,
    num_states,
    reverse_probs,
)
from .rewards import RewardFn
from .util import NEG_INF, log_normalize, logsumexp, safe_log


@dataclass
class DistTable:
    """A normalized distribution over an explicit state enumeration."""

    states: np.ndarray          # (S, N) integer states
    log_probs: np.ndarray       # (S,), logsumexp == 0
    log_normalizer: float = 0.0  # log of the mass removed by normalization

    def __post_init__(self):
        total = logsumexp(self.log_probs)
        if abs(total) > 1e-10:
            raise ValueError(f"table not normalized: logsumexp = {total}")

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for seq, p in zip(self.states, self.probs):
                fh.write(" ".join(map(str, seq)) + f" {float(p)!r}\n")


def kl(p: DistTable | np.ndarray, q: DistTable | np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0; +inf when q lacks support p has."""
    p = p.probs if isinstance(p, DistTable) else np.asarray(p)
    q = q.probs if isinstance(q, DistTable) else np.asarray(q)
    if p.shape != q.shape:
        raise ValueError("tables use different enumerations")
    support = p > 0
    if np.any(q[support] == 0):
        return np.inf
    ps, qs = p[support], q[support]
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def tv(p: DistTable | np.ndarray, q: DistTable | np.ndarray) -> float:
    """Total variation distance 0.5 * sum |p - q|."""
    p = p.probs if isinstance(p, DistTable) else np.asarray(p)
    q = q.probs if isinstance(q, DistTable) else np.asarray(q)
    if p.shape != q.shape:
        raise ValueError("tables use different enumerations")
    return float(0.5 * np.sum(np.abs(p - q)))


class ExactOracle:
    """Exact enumeration backend for one (denoiser, schedule) pair.

    Builds per-step (S, S) reverse-kernel matrices lazily and caches the
    derived tables. Denoiser queries must be pure; the reward is evaluated
    exactly once per clean state when a twist table is first requested.
    """

    def __init__(self, den: Denoiser, sched: NoiseSchedule, length: int | None = None,
                 cap: int = DEFAULT_STATE_CAP):
        self.den = den
        self.sched = sched
        self.vocab: Vocab = den.vocab
        self.length = length if length is not None else den.length
        if num_states(self.vocab.size + 1, self.length) > cap:
            raise StateSpaceTooLarge(
                f"({self.vocab.size + 1})^{self.length} states exceeds cap {cap}")
        self.states = enumerate_states(self.vocab.size + 1, self.length, cap=cap)
        self.clean_states = enumerate_states(self.vocab.size, self.length, cap=cap)
        # index of each clean state inside the noisy enumeration
        self.clean_idx = encode_states(self.clean_states, self.vocab.size + 1)
        self._mask_state_idx = int(
            encode_states(np.full(self.length, self.vocab.mask_id), self.vocab.size + 1))
        self._kernels: dict[int, np.ndarray] = {}
        self._marginals: dict[int, np.ndarray] = {}
        self._twists: dict[tuple[str, float], np.ndarray] = {}

    # -- kernels and marginals -----------------------------------------

    def _log_kernel(self, t: int) -> np.ndarray:
        """log p(x_{t-1}=row_j | x_t=row_i) as an (S, S) matrix."""
        if t not in self._kernels:
            probs = reverse_probs(self.den.predict_batch(self.states, t),
                                  self.states, t, self.sched, self.vocab)
            logq = safe_log(probs)                       # (S, N, V+1)
            out = np.zeros((len(self.states), len(self.states)))
            for pos in range(self.length):
                out += logq[:, pos, self.states[:, pos]]
            self._kernels[t] = out
        return self._kernels[t]

    def _log_marginal(self, t: int) -> np.ndarray:
        if t not in self._marginals:
            logp = np.full(len(self.states), NEG_INF)
            logp[self._mask_state_idx] = 0.0
            self._marginals[self.sched.T] = logp
            for s in range(self.sched.T, t, -1):
                if s - 1 in self._marginals:
                    continue
                prev = self._marginals[s]
                self._marginals[s - 1] = logsumexp(
                    prev[:, None] + self._log_kernel(s), axis=0)
        return self._marginals[t]

    def exact_base_marginal(self, t: int) -> DistTable:
        """Exact marginal of the base reverse chain at step t."""
        if not 0 <= t <= self.sched.T:
            raise ValueError(f"t={t} outside 0..{self.sched.T}")
        return DistTable(self.states, log_normalize(self._log_marginal(t).copy()))

    def base_marginal_clean(self, t: int = 0) -> np.ndarray:
        """Marginal at step t restricted to the clean-state enumeration."""
        return np.exp(self._log_marginal(t))[self.clean_idx]

    # -- value function and twist ----------------------------------------

    def _log_twist_table(self, r: RewardFn, beta: float) -> np.ndarray:
        """(T+1, S) table of log E[exp(r(x_0)/beta) | x_t = state]."""
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        key = (r.name, float(beta))
        if key not in self._twists:
            table = np.full((self.sched.T + 1, len(self.states)), NEG_INF)
            table[0, self.clean_idx] = r.batch(self.clean_states) / beta
            for t in range(1, self.sched.T + 1):
                table[t] = logsumexp(self._log_kernel(t) + table[t - 1][None, :], axis=1)
            self._twists[key] = table
        return self._twists[key]

    def exact_posterior_r_moment(self, r: RewardFn, beta: float, t: int,
                                 x_t: np.ndarray) -> float:
        """E[exp(r(x_0)/beta) | x_t] under the base chain's completion law."""
        return float(np.exp(self.exact_log_twist(r, beta, t, x_t)))

    def exact_value(self, r: RewardFn, beta: float, t: int, x_t: np.ndarray) -> float:
        return beta * self.exact_log_twist(r, beta, t, x_t)

    def exact_log_twist(self, r: RewardFn, beta: float, t: int, x_t: np.ndarray) -> float:
        idx = int(encode_states(np.asarray(x_t), self.vocab.size + 1))
        return float(self._log_twist_table(r, beta)[t, idx])

    def log_twist_batch(self, r: RewardFn, beta: float, t: int, xs: np.ndarray) -> np.ndarray:
        table = self._log_twist_table(r, beta)
        return table[t, encode_states(np.asarray(xs), self.vocab.size + 1)]

    # -- tilted distributions ---------------------------------------------

    def exact_target(self, r: RewardFn, beta: float, t: int) -> DistTable:
        """Base marginal reweighted by the optimal twist, normalized."""
        log_unnorm = self._log_marginal(t) + self._log_twist_table(r, beta)[t]
        log_z = logsumexp(log_unnorm)
        return DistTable(self.states, log_unnorm - log_z, log_normalizer=log_z)

    def exact_tilted(self, log_psi: np.ndarray, t: int) -> DistTable:
        """Base marginal reweighted by an arbitrary log-twist vector over states."""
        log_psi = np.asarray(log_psi, dtype=np.float64)
        if log_psi.shape != (len(self.states),):
            raise ValueError(f"expected one log-twist value per state, got {log_psi.shape}")
        log_unnorm = self._log_marginal(t) + log_psi
        log_z = logsumexp(log_unnorm)
        return DistTable(self.states, log_unnorm - log_z, log_normalizer=log_z)

    def tilted_from_twist(self, twist, r: RewardFn | None, t: int) -> DistTable:
        """Convenience: evaluate a TwistFn on every state, then tilt."""
        return self.exact_tilted(twist.log_psi_batch(self.states, t), t)

    def forward_decomposition(self, r: RewardFn, beta: float, t: int) -> DistTable:
        """Push the tilted clean distribution through the masking kernel.

        Computes sum over x_0 of p*_0(x_0) * k_t(x_t | x_0), where k_t masks
        each position independently with probability 1 - alpha_t.
        """
        if not 0 <= t <= self.sched.T:
            raise ValueError(f"t={t} outside 0..{self.sched.T}")
        log_p0 = self.exact_target(r, beta, 0).log_probs[self.clean_idx]
        a_t = self.sched.alpha(t)
        with np.errstate(divide="ignore"):
            log_keep, log_mask = np.log(a_t), np.log(1.0 - a_t)
        # log k_t(state_j | clean_i), built position by position
        log_fwd = np.zeros((len(self.clean_states), len(self.states)))
        for pos in range(self.length):
            same = self.clean_states[:, pos][:, None] == self.states[None, :, pos]
            is_mask = (self.states[None, :, pos] == self.vocab.mask_id)
            contrib = np.where(is_mask, log_mask, np.where(same, log_keep, NEG_INF))
            log_fwd += contrib
        log_pt = logsumexp(log_p0[:, None] + log_fwd, axis=0)
        return DistTable(self.states, log_normalize(log_pt))
