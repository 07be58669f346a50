"""Twisted sequential Monte Carlo / importance sampling for the reverse chain.

Particles start at the all-mask state with unit weights and are advanced by a
proposal kernel from step T down to t_stop. Each step multiplies the weights
by the twist ratio psi_{t-1}(x_{t-1}) / psi_t(x_t), corrected by the density
ratio p_base/q when the proposal is not the base kernel. Resampling is
multinomial and triggers when the normalized effective sample size drops
below a threshold fraction of K; a threshold of 0 disables resampling and
reduces the sampler to importance sampling, in which case the twist ratios
telescope and the twist is evaluated only once, at t_stop.

Twist values are computed once per (particle, step) and carried to the next
step's denominator (re-indexed on resample). For the Monte-Carlo twist this
is what makes the telescoping identity hold with stochastic estimates, and
it prices a run at exactly K*M*(T - t_stop) reward calls (K*M in IS mode).
The twist at the shared all-mask start is a particle-independent constant
and is omitted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    DataDist,
    Denoiser,
    NoiseSchedule,
    TabularDenoiser,
    reverse_step_sample_batch,
    sample_base_batch,
    transition_logprob,
    transition_logprob_batch,
)
from .rewards import RewardFn
from .util import NEG_INF, log_normalize, logsumexp


class BaseProposal:
    """Propose with the base model's own reverse kernel."""

    is_base = True

    def __init__(self, den: Denoiser, sched: NoiseSchedule):
        self.den = den
        self.sched = sched

    def sample(self, x_t: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        return reverse_step_sample_batch(np.atleast_2d(x_t), t, self.den, self.sched, rng)

    def logprob(self, x_t: np.ndarray, x_prev: np.ndarray, t: int) -> np.ndarray:
        return transition_logprob_batch(np.atleast_2d(x_t), np.atleast_2d(x_prev),
                                        t, self.den, self.sched)


class TiltedProposal:
    """Reward-aware proposal: the reverse kernel of a tilted data distribution.

    Stands in for a fine-tuned model with a kernel that is exactly computable,
    so density-ratio corrections can be verified against enumeration.
    """

    is_base = False

    def __init__(self, den: TabularDenoiser, sched: NoiseSchedule):
        self.den = den
        self.sched = sched

    def sample(self, x_t: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        return reverse_step_sample_batch(np.atleast_2d(x_t), t, self.den, self.sched, rng)

    def logprob(self, x_t: np.ndarray, x_prev: np.ndarray, t: int) -> np.ndarray:
        return transition_logprob_batch(np.atleast_2d(x_t), np.atleast_2d(x_prev),
                                        t, self.den, self.sched)


def tilted_proposal(data: DataDist, r: RewardFn, beta_prop: float,
                    sched: NoiseSchedule) -> TiltedProposal:
    """Proposal kernel of the exp(r/beta_prop)-tilted data distribution.

    Evaluates the reward once per clean state to build the tilted table
    (charged to the ledger: this is the stand-in for fine-tuning cost).
    """
    if beta_prop <= 0:
        raise ValueError(f"beta_prop must be positive, got {beta_prop}")
    log_w = np.log(np.maximum(data.probs, 1e-300)) + r.batch(data.states) / beta_prop
    log_w[data.probs == 0] = NEG_INF
    probs = np.exp(log_w - logsumexp(log_w))
    tilted = DataDist(data.vocab, data.length, probs / probs.sum())
    return TiltedProposal(TabularDenoiser(tilted), sched)


def ess(log_normalized_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_tilde^2) from normalized log weights."""
    return float(np.exp(-logsumexp(2.0 * np.asarray(log_normalized_weights))))


def _log_kernel_ratio(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """log p - log q with -inf in p dominating (keeps weights total in log space)."""
    log_p, log_q = np.asarray(log_p, dtype=float), np.asarray(log_q, dtype=float)
    with np.errstate(invalid="ignore"):
        out = log_p - log_q
    return np.where(log_p == NEG_INF, NEG_INF, out)


def incremental_log_weight(x_t: np.ndarray, x_prev: np.ndarray, t: int, twist,
                           proposal, den: Denoiser, sched: NoiseSchedule) -> float:
    """One-step log weight for the transition x_t -> x_prev.

    log psi_{t-1}(x_prev) - log psi_t(x_t) + log p_base(x_prev|x_t) - log q;
    under the base proposal the kernel terms cancel exactly and are skipped.
    """
    out = twist.log_psi(x_prev, t - 1) - twist.log_psi(x_t, t)
    if not proposal.is_base:
        log_p = transition_logprob(x_t, x_prev, t, den, sched)
        log_q = float(proposal.logprob(np.asarray(x_t)[None], np.asarray(x_prev)[None], t)[0])
        out += float(_log_kernel_ratio(log_p, log_q))
    return float(out)


@dataclass
class ParticleSystem:
    """K particle states with raw log weights and resampling bookkeeping."""

    states: np.ndarray                 # (K, N)
    log_weights: np.ndarray            # (K,) raw cumulative log W
    t: int
    log_twist: np.ndarray | None = None  # cached log psi_t(states)
    resample_steps: list = field(default_factory=list)
    ess_trace: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.states)

    def normalized_log_weights(self) -> np.ndarray:
        return log_normalize(self.log_weights)


def multinomial_resample(system: ParticleSystem, rng: np.random.Generator) -> ParticleSystem:
    """Draw K ancestors from the normalized weights; reset weights to 1."""
    w = np.exp(system.normalized_log_weights())
    ancestors = rng.choice(system.K, size=system.K, p=w / w.sum())
    system.states = system.states[ancestors]
    if system.log_twist is not None:
        system.log_twist = system.log_twist[ancestors]
    system.log_weights = np.zeros(system.K)
    system.resample_steps.append(system.t)
    return system


@dataclass
class SmcConfig:
    num_particles: int
    ess_threshold: float = 0.5   # normalized: resample iff ESS < threshold * K
    t_stop: int = 0
    record_trajectories: bool = False

    def __post_init__(self):
        if self.num_particles < 1:
            raise ValueError("need at least one particle")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold is a fraction of K, must be in [0, 1]")
        if self.t_stop < 0:
            raise ValueError("t_stop must be >= 0")


@dataclass
class SmcResult:
    states: np.ndarray               # (K, N) particles at t_stop
    log_weights: np.ndarray          # (K,) normalized (logsumexp == 0)
    raw_log_weights: np.ndarray      # (K,) cumulative since the last resample
    t_stop: int
    ess_trace: list                  # pre-resample ESS, one entry per step
    resample_steps: list             # timesteps (of the new states) that resampled
    wall_ms: float
    trajectories: np.ndarray | None = None  # (steps+1, K, N) post-resample states

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def twist_smc(cfg: SmcConfig, proposal, twist, den: Denoiser, sched: NoiseSchedule,
              rng: np.random.Generator) -> SmcResult:
    """Run twisted SMC (or IS when ess_threshold == 0) down to cfg.t_stop."""
    if cfg.t_stop > sched.T:
        raise ValueError(f"t_stop={cfg.t_stop} exceeds T={sched.T}")
    t0 = time.perf_counter()
    K = cfg.num_particles
    sys = ParticleSystem(
        states=np.full((K, den.length), den.vocab.mask_id, dtype=np.int64),
        log_weights=np.zeros(K),
        t=sched.T,
        log_twist=np.zeros(K),  # psi_T omitted: shared start state
    )
    is_mode = cfg.ess_threshold == 0.0
    traj = [sys.states.copy()] if cfg.record_trajectories else None

    for t in range(sched.T, cfg.t_stop, -1):
        x_prev = proposal.sample(sys.states, t, rng)
        if is_mode:
            inc = np.zeros(K)
            log_tw_prev = None
        else:
            log_tw_prev = twist.log_psi_batch(x_prev, t - 1)
            inc = log_tw_prev - sys.log_twist
        if not proposal.is_base:
            inc = inc + _log_kernel_ratio(
                transition_logprob_batch(sys.states, x_prev, t, den, sched),
                proposal.logprob(sys.states, x_prev, t))
        sys.states = x_prev
        sys.log_twist = log_tw_prev
        sys.log_weights = sys.log_weights + inc
        sys.t = t - 1
        if np.all(sys.log_weights == NEG_INF):
            raise RuntimeError(
                f"degenerate particle system: all weights vanished at t={t - 1}")
        step_ess = ess(sys.normalized_log_weights())
        sys.ess_trace.append(step_ess)
        # the returned pair is (x_{t_stop}, normalized W_{t_stop}); resampling
        # only matters while the chain continues
        if t - 1 > cfg.t_stop and step_ess < cfg.ess_threshold * K:
            multinomial_resample(sys, rng)
        if traj is not None:
            traj.append(sys.states.copy())

    if is_mode:
        # telescoped twist: only the final value enters the weights
        sys.log_weights = sys.log_weights + twist.log_psi_batch(sys.states, cfg.t_stop)
        if np.all(sys.log_weights == NEG_INF):
            raise RuntimeError("degenerate particle system: all weights vanished at t_stop")

    return SmcResult(
        states=sys.states,
        log_weights=sys.normalized_log_weights(),
        raw_log_weights=sys.log_weights.copy(),
        t_stop=cfg.t_stop,
        ess_trace=sys.ess_trace,
        resample_steps=sys.resample_steps,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        trajectories=np.stack(traj) if traj is not None else None,
    )


def best_of_n(n: int, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
              rng: np.random.Generator) -> np.ndarray:
    """Draw n base samples and return the highest-reward one.

    Ties break toward the lowest sample index. Charges n reward calls.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = sample_base_batch(den, sched, n, rng)
    values = r.batch(xs)
    return xs[int(np.argmax(values))]
