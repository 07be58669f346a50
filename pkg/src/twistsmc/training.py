"""Twist learning: soft-value regression and contrastive distribution matching.

Two objectives train the learned twist head:

- "svdd": regress exp(log_psi) onto a Monte-Carlo estimate of the optimal
  twist under states drawn from the base chain (mean squared error in the
  linear twist domain).
- "cdm": minimize the forward KL from the reward-tilted target to the
  twist-tilted distribution. The gradient contrasts positive samples (from
  the target) against negative samples (from the current tilt). Positives
  are clean samples drawn once by twisted SMC into a buffer and re-noised
  through the closed-form forward kernel, so one expensive reward-charged
  refresh serves many gradient steps; negatives come from importance
  sampling under an EMA copy of the head and never touch the reward.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import Denoiser, NoiseSchedule, sample_reverse_batch
from .oracle import ExactOracle, kl
from .rewards import RewardFn
from .smc import SmcConfig, twist_smc, BaseProposal
from .twist import LearnedTwist, McTwist, McTwistConfig
from .util import logsumexp


@dataclass
class TrainConfig:
    beta: float = 0.5
    mc_samples: int = 1            # M for the Monte-Carlo twist targets
    batch_size: int = 64           # B
    buffer_size: int = 256         # positive buffer capacity
    n_update: int = 4              # buffer refresh interval (in steps)
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    ema_rate: float = 0.99
    positive_ess_threshold: float = 0.5  # ESS threshold of the positive sampler
    positive_sampler: str = "smc"  # "smc" or "is" (is == ess threshold 0)
    positive_weighting: str = "consume"  # or "coefficient", see cdm_step
    steps: int = 2000
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float = 10.0        # svdd only: exp-domain targets can spike
    eval_every: int = 100
    eval_particles: int = 256
    max_reward_calls: int = 0      # 0 = unlimited; otherwise stop at this budget

    def __post_init__(self):
        if self.n_update < 1:
            raise ValueError("n_update must be >= 1")
        if self.positive_sampler not in ("smc", "is"):
            raise ValueError(f"unknown positive sampler {self.positive_sampler!r}")
        if self.positive_weighting not in ("consume", "coefficient"):
            raise ValueError(f"unknown positive weighting {self.positive_weighting!r}")
        for name in ("beta", "mc_samples", "batch_size", "buffer_size",
                     "learning_rate", "ema_rate", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PositiveBuffer:
    """Weighted clean samples approximating the tilted clean distribution."""

    states: np.ndarray        # (B_buffer, N), no masks
    weights: np.ndarray       # normalized, sum to 1
    age: int = 0

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("buffer weights must be nonnegative and sum to 1")

    def draw(self, n: int, rng: np.random.Generator, mode: str = "consume"):
        """Return (states, gradient coefficients) for n positives.

        "consume": draw proportional to the weights, each drawn sample
        contributes 1/n. "coefficient": draw uniformly and carry the weight
        as a coefficient (scaled to keep the estimator unbiased).
        """
        if mode == "consume":
            idx = rng.choice(len(self.states), size=n, p=self.weights)
            coeffs = np.full(n, 1.0 / n)
        else:
            idx = rng.integers(0, len(self.states), size=n)
            coeffs = len(self.states) * self.weights[idx] / n
        return self.states[idx], coeffs


def _positive_threshold(cfg: TrainConfig) -> float:
    return 0.0 if cfg.positive_sampler == "is" else cfg.positive_ess_threshold


def cdm_refresh_buffer(den: Denoiser, sched: NoiseSchedule, r: RewardFn,
                       cfg: TrainConfig, rng: np.random.Generator) -> PositiveBuffer:
    """Fill the buffer with weighted clean samples from twisted SMC.

    The twist inside the sampler is the Monte-Carlo estimate with cfg.mc_samples
    completions, so each refresh is where the reward budget is spent.
    """
    mc = McTwist(den, sched, r, McTwistConfig(M=cfg.mc_samples, beta=cfg.beta))
    mc.rng = rng
    res = twist_smc(SmcConfig(cfg.buffer_size, _positive_threshold(cfg), t_stop=0),
                    BaseProposal(den, sched), mc, den, sched, rng)
    return PositiveBuffer(states=res.states, weights=res.weights)


def cdm_negatives(head_ema: LearnedTwist, den: Denoiser, sched: NoiseSchedule,
                  t: int, n: int, rng: np.random.Generator):
    """Importance-sampled states targeting the EMA-twist-tilted marginal at t.

    Base-chain rollouts to t, self-normalized by the EMA twist value. Costs
    zero reward calls. Returns (states, normalized weights).
    """
    res = twist_smc(SmcConfig(n, ess_threshold=0.0, t_stop=t),
                    BaseProposal(den, sched), head_ema, den, sched, rng)
    return res.states, res.weights


def cdm_gradient(grad_fn, t: int, pos_states: np.ndarray, pos_coeffs: np.ndarray,
                 neg_states: np.ndarray, neg_weights: np.ndarray) -> np.ndarray:
    """Loss gradient of the contrastive objective from weighted samples.

    grad_fn(states, t, coeffs) must return the gradient of
    sum_i coeffs[i] * log_psi(states[i], t) with respect to the parameters.
    Positive coefficients sum to ~1 across the batch, negative weights are
    self-normalized to 1: the estimator's fixed point is an exact match of
    the two distributions. Returns the gradient to descend (negative of the
    positive-minus-negative contrast).
    """
    g_pos = grad_fn(pos_states, t, pos_coeffs)
    g_neg = grad_fn(neg_states, t, neg_weights)
    return g_neg - g_pos


@dataclass
class TwistTrainer:
    """Owns the head, its EMA shadow, optimizer state, and the buffer."""

    head: LearnedTwist
    ema: nn.EmaState
    opt: nn.AdamWState
    cfg: TrainConfig
    buffer: PositiveBuffer | None = None

    @classmethod
    def create(cls, vocab, T, cfg: TrainConfig, rng: np.random.Generator) -> "TwistTrainer":
        head = LearnedTwist.create(vocab, T, cfg.hidden, rng)
        return cls(
            head=head,
            ema=nn.EmaState(shadow=head.params.copy(), rate=cfg.ema_rate),
            opt=nn.AdamWState.create(head.spec, lr=cfg.learning_rate,
                                     weight_decay=cfg.weight_decay),
            cfg=cfg,
        )

    def ema_head(self) -> LearnedTwist:
        return LearnedTwist(self.head.vocab, self.head.T, self.head.spec, self.ema.shadow)


def _weight_entropy(w: np.ndarray) -> float:
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def cdm_collect(trainer: TwistTrainer, den: Denoiser, sched: NoiseSchedule,
                r: RewardFn, step_index: int, rng: np.random.Generator):
    """Draw one step's timestep, positives, and negatives (no parameter update).

    step_index is 0-based: buffer refreshes land on steps 0, n_update,
    2*n_update, ..., i.e. exactly ceil(steps/n_update) refreshes over a run.
    Positives are buffer clean samples pushed through the forward kernel to
    the drawn timestep; negatives are importance-sampled under the EMA head.
    """
    cfg = trainer.cfg
    if step_index % cfg.n_update == 0 or trainer.buffer is None:
        trainer.buffer = cdm_refresh_buffer(den, sched, r, cfg, rng)
    trainer.buffer.age += 1

    t = int(rng.integers(1, sched.T + 1))
    x0, pos_coeffs = trainer.buffer.draw(cfg.batch_size, rng, cfg.positive_weighting)
    keep = rng.random(x0.shape) < sched.alpha(t)
    pos_states = np.where(keep, x0, den.vocab.mask_id)

    neg_states, neg_weights = cdm_negatives(trainer.ema_head(), den, sched, t,
                                            cfg.batch_size, rng)
    return t, pos_states, pos_coeffs, neg_states, neg_weights


def cdm_step(trainer: TwistTrainer, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
             step_index: int, rng: np.random.Generator) -> dict:
    """One contrastive update; refreshes the buffer on the n_update cadence."""
    cfg = trainer.cfg
    t, pos_states, pos_coeffs, neg_states, neg_weights = cdm_collect(
        trainer, den, sched, r, step_index, rng)

    grad = cdm_gradient(trainer.head.grad_log_psi_batch, t,
                        pos_states, pos_coeffs, neg_states, neg_weights)
    if not np.all(np.isfinite(grad)):
        pos_lp = trainer.head.log_psi_batch(pos_states, t)
        neg_lp = trainer.head.log_psi_batch(neg_states, t)
        raise FloatingPointError(
            "non-finite contrastive gradient at step "
            f"{step_index}: max |log psi| = "
            f"{np.max(np.abs(np.concatenate([pos_lp, neg_lp])))}, "
            f"negative-weight entropy = {_weight_entropy(neg_weights)}")
    trainer.head.params = trainer.opt.step(trainer.head.params, grad)
    nn.ema_update(trainer.ema, trainer.head.params)

    # IS estimate of the objective up to phi-independent constants:
    # -E_target[log psi] + log Z_phi, with log Z_phi from the negative rollouts
    neg_lp = trainer.head.log_psi_batch(neg_states, t)
    surrogate = float(-(pos_coeffs @ trainer.head.log_psi_batch(pos_states, t))
                      + logsumexp(neg_lp) - np.log(len(neg_lp)))
    return {"t": t, "loss": surrogate, "grad_norm": float(np.linalg.norm(grad))}


def svdd_step(trainer: TwistTrainer, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
              rng: np.random.Generator) -> dict:
    """One regression update onto Monte-Carlo twist targets under base states."""
    cfg = trainer.cfg
    t = int(rng.integers(1, sched.T + 1))
    start = np.full((cfg.batch_size, den.length), den.vocab.mask_id, dtype=np.int64)
    x_t = sample_reverse_batch(den, sched, start, sched.T, t, rng)

    mc = McTwist(den, sched, r, McTwistConfig(M=cfg.mc_samples, beta=cfg.beta))
    mc.rng = rng
    targets = np.exp(mc.log_psi_batch(x_t, t))

    log_pred = trainer.head.log_psi_batch(x_t, t)
    with np.errstate(over="ignore"):  # overflow lands in the abort check below
        pred = np.exp(log_pred)
        err = pred - targets
        loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite regression loss: max |log psi| = {np.max(np.abs(log_pred))}")
    # d loss / d log_psi_i in the linear twist domain
    coeffs = 2.0 * err * pred / cfg.batch_size
    grad = trainer.head.grad_log_psi_batch(x_t, t, coeffs)
    grad = nn.clip_grad_norm(grad, cfg.grad_clip)
    trainer.head.params = trainer.opt.step(trainer.head.params, grad)
    return {"t": t, "loss": loss, "grad_norm": float(np.linalg.norm(grad))}


def time_averaged_target_kl(oracle: ExactOracle, r: RewardFn, beta: float,
                            twist) -> float:
    """Mean over t = 1..T of KL(target_t || tilted_t) under a twist function.

    Mirrors the training objective's uniform draw of t; t = T contributes 0
    because the marginal there is a point mass.
    """
    total = 0.0
    for t in range(1, oracle.sched.T + 1):
        target = oracle.exact_target(r, beta, t)
        tilted = oracle.exact_tilted(twist.log_psi_batch(oracle.states, t), t)
        total += kl(target, tilted)
    return total / oracle.sched.T


@dataclass
class TrainResult:
    head: LearnedTwist
    ema_head: LearnedTwist
    metrics: list[dict] = field(default_factory=list)

    @property
    def final_kl(self) -> float:
        return self.metrics[-1]["oracle_kl"]


def train(objective: str, den: Denoiser, sched: NoiseSchedule, r: RewardFn,
          cfg: TrainConfig, oracle: ExactOracle | None = None) -> TrainResult:
    """Run twist training and collect a metrics time series.

    Every cfg.eval_every steps (and at the end) records the reward-call
    ledger, mean reward of twist-guided SMC with the current head, and the
    enumeration KL diagnostic when an oracle is given. Evaluation-time reward
    calls are rolled back from the ledger so the series reflects training
    cost only. Honors cfg.max_reward_calls as a stopping budget.
    """
    if objective not in ("cdm", "svdd"):
        raise ValueError(f"unknown objective {objective!r}")
    rng = np.random.default_rng(cfg.seed)
    trainer = TwistTrainer.create(den.vocab, sched.T, cfg, rng)
    metrics: list[dict] = []
    wall_ms = 0.0

    def evaluate(step: int, last: dict) -> None:
        # contrastive training maintains (and ships) the EMA shadow; the
        # regression objective has no EMA and ships its live parameters
        head = trainer.ema_head() if objective == "cdm" else trainer.head
        snapshot = r.calls
        eval_rng = np.random.default_rng((cfg.seed, step))
        res = twist_smc(SmcConfig(cfg.eval_particles, 0.5, t_stop=0),
                        BaseProposal(den, sched), head, den, sched, eval_rng)
        mean_reward = float(res.weights @ r.batch(res.states))
        r.calls = snapshot  # measurement, not training cost
        row = {
            "step": step,
            "wall_ms": wall_ms,
            "reward_calls": snapshot,
            "mean_reward": mean_reward,
            "oracle_kl": (time_averaged_target_kl(oracle, r, cfg.beta, head)
                          if oracle is not None else float("nan")),
            "loss": last.get("loss", float("nan")),
        }
        metrics.append(row)

    last: dict = {}
    evaluate(0, last)
    executed = 0
    for step in range(cfg.steps):
        if cfg.max_reward_calls and r.calls >= cfg.max_reward_calls:
            break
        t0 = time.perf_counter()
        if objective == "cdm":
            last = cdm_step(trainer, den, sched, r, step, rng)
        else:
            last = svdd_step(trainer, den, sched, r, rng)
        wall_ms += (time.perf_counter() - t0) * 1e3
        executed = step + 1
        if executed % cfg.eval_every == 0:
            evaluate(executed, last)
    if not metrics or metrics[-1]["step"] != executed:
        evaluate(executed, last)
    shipped = trainer.ema_head() if objective == "cdm" else trainer.head
    return TrainResult(head=trainer.head, ema_head=shipped, metrics=metrics)
