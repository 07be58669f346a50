"""Masked discrete diffusion core.

Sequences of length N over a vocabulary of V clean tokens (0..V-1) plus a
distinguished mask symbol with index V. The forward process independently
replaces each clean token with the mask symbol: at step t a position keeps
its clean token with probability alpha_t and is masked otherwise, where
alpha_0 = 1 > alpha_1 > ... > alpha_T = 0.

The reverse kernel factorizes over positions. An unmasked position keeps
its token. A masked position stays masked with probability
(1 - alpha_{t-1}) / (1 - alpha_t) and unmasks to token v with probability
((alpha_{t-1} - alpha_t) / (1 - alpha_t)) * d[v], where d is the denoiser's
predicted distribution over clean tokens for that position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .util import safe_log, sample_categorical_rows

DEFAULT_STATE_CAP = 200_000


class StateSpaceTooLarge(ValueError):
    """Raised when an enumeration would exceed the configured state cap."""


@dataclass(frozen=True)
class Vocab:
    """Clean-token alphabet 0..size-1; the mask symbol has index size."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


def num_states(n_symbols: int, length: int) -> int:
    return n_symbols**length

def enumerate_states(n_symbols: int, length: int, cap: int = DEFAULT_STATE_CAP) -> np.ndarray:
    """All length-`length` sequences over 0..n_symbols-1, shape (S, length).

    Row order matches :func:`encode_states` (position 0 is the fastest-
    varying digit). Refuses to build more than `cap` states.
    """
    total = num_states(n_symbols, length)
    if total > cap:
        raise StateSpaceTooLarge(
            f"{n_symbols}^{length} = {total} states exceeds cap {cap}"
        )
    idx = np.arange(total)
    out = np.empty((total, length), dtype=np.int64)
    for pos in range(length):
        out[:, pos] = idx % n_symbols
        idx = idx // n_symbols
    return out


def encode_states(x: np.ndarray, n_symbols: int) -> np.ndarray:
    """Map sequences (..., length) to their enumeration indices."""
    x = np.asarray(x)
    weights = n_symbols ** np.arange(x.shape[-1], dtype=np.int64)
    return x @ weights


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone masking schedule alpha_0..alpha_T with alpha_0=1, alpha_T=0."""

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or len(a) < 2:
            raise ValueError("schedule needs at least alpha_0 and alpha_T")
        if a[0] != 1.0 or a[-1] != 0.0:
            raise ValueError("schedule must start at 1 and end at 0")
        if np.any(np.diff(a) >= 0):
            raise ValueError("schedule must be strictly decreasing")
        if np.any((a < 0) | (a > 1)):
            raise ValueError("schedule values must lie in [0, 1]")

    @property
    def T(self) -> int:
        return len(self.alphas) - 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[t])

    @classmethod
    def linear(cls, T: int) -> "NoiseSchedule":
        """alpha_t = 1 - t/T."""
        if T < 1:
            raise ValueError("T must be >= 1")
        return cls(1.0 - np.arange(T + 1) / T)

    @classmethod
    def by_name(cls, name: str, T: int) -> "NoiseSchedule":
        if name == "linear":
            return cls.linear(T)
        raise ValueError(f"unknown schedule {name!r}")


class DataDist:
    """Explicit probability table over all V^N clean sequences."""

    def __init__(self, vocab: Vocab, length: int, probs: np.ndarray,
                 cap: int = DEFAULT_STATE_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        total = num_states(vocab.size, length)
        if total > cap:
            raise StateSpaceTooLarge(f"{total} clean states exceeds cap {cap}")
        if probs.shape != (total,):
            raise ValueError(f"expected {total} probabilities, got {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        self.vocab = vocab
        self.length = length
        self.probs = probs / probs.sum()
        self.states = enumerate_states(vocab.size, length, cap=cap)

    def marginal(self, pos: int) -> np.ndarray:
        """Per-token marginal probability at one position, shape (V,)."""
        out = np.zeros(self.vocab.size)
        np.add.at(out, self.states[:, pos], self.probs)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        return self.states[idx]

    # -- constructors -------------------------------------------------

    @classmethod
    def uniform(cls, vocab: Vocab, length: int) -> "DataDist":
        total = num_states(vocab.size, length)
        return cls(vocab, length, np.full(total, 1.0 / total))

    @classmethod
    def point_mass(cls, vocab: Vocab, x0: np.ndarray) -> "DataDist":
        x0 = np.asarray(x0)
        probs = np.zeros(num_states(vocab.size, len(x0)))
        probs[int(encode_states(x0, vocab.size))] = 1.0
        return cls(vocab, len(x0), probs)

    @classmethod
    def from_marginals(cls, vocab: Vocab, marginals: np.ndarray) -> "DataDist":
        """Product distribution with the given (N, V) per-position marginals."""
        marginals = np.asarray(marginals, dtype=np.float64)
        length = marginals.shape[0]
        states = enumerate_states(vocab.size, length)
        probs = np.ones(len(states))
        for pos in range(length):
            probs *= marginals[pos, states[:, pos]]
        return cls(vocab, length, probs)

    @classmethod
    def random_product(cls, vocab: Vocab, length: int,
                       rng: np.random.Generator, concentration: float = 2.0) -> "DataDist":
        """Product distribution with independent Dirichlet marginals."""
        marg = rng.dirichlet(np.full(vocab.size, concentration), size=length)
        return cls.from_marginals(vocab, marg)

    @classmethod
    def random_table(cls, vocab: Vocab, length: int, rng: np.random.Generator,
                     concentration: float = 1.0) -> "DataDist":
        """Fully general (typically correlated) random table."""
        total = num_states(vocab.size, length)
        return cls(vocab, length, rng.dirichlet(np.full(total, concentration)))

    # -- text round trip ----------------------------------------------

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for seq, p in zip(self.states, self.probs):
                fh.write(" ".join(map(str, seq)) + f" {float(p)!r}\n")

    @classmethod
    def load(cls, path, vocab_size: int | None = None) -> "DataDist":
        """Read (sequence, probability) lines: space-separated token indices
        followed by the probability. Unlisted sequences get probability 0."""
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) < 2:
                    raise ValueError(f"{path}:{lineno}: need tokens and a probability")
                rows.append(([int(s) for s in parts[:-1]], float(parts[-1])))
        if not rows:
            raise ValueError(f"{path}: no entries")
        length = len(rows[0][0])
        if vocab_size is None:
            vocab_size = 1 + max(max(seq) for seq, _ in rows)
        vocab = Vocab(vocab_size)
        probs = np.zeros(num_states(vocab.size, length))
        for seq, p in rows:
            if len(seq) != length:
                raise ValueError(f"{path}: inconsistent sequence lengths")
            probs[int(encode_states(np.asarray(seq), vocab.size))] += p
        total = probs.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"{path}: probabilities sum to {total}, not 1")
        return cls(vocab, length, probs / total)


class Denoiser(Protocol):
    """Per-position predictor of clean-token distributions.

    predict(x_t, t) returns an (N, V) array of probability vectors; rows for
    positions that are already unmasked in x_t are never consumed.
    """

    vocab: Vocab

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray: ...

    def predict_batch(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


class TabularDenoiser:
    """Exact posterior-mean denoiser for an enumerable data distribution.

    For each masked position the prediction is the conditional probability of
    each clean token given that the clean sequence agrees with x_t on every
    unmasked position (masking is content-independent, so this conditional is
    the exact forward-process posterior). If the unmasked pattern has zero
    mass under the data the row falls back to uniform and
    ``fallback_count`` is incremented.
    """

    def __init__(self, data: DataDist, cap: int = DEFAULT_STATE_CAP):
        self.data = data
        self.vocab = data.vocab
        self.length = data.length
        self.fallback_count = 0
        self._table = self._build_table(cap)
        self._n_noisy = self.vocab.size + 1

    def _build_table(self, cap: int) -> np.ndarray:
        V, N = self.vocab.size, self.length
        noisy = enumerate_states(V + 1, N, cap=cap)          # (S, N)
        clean = self.data.states                             # (C, N)
        w = self.data.probs                                  # (C,)
        # consistent[s, c]: clean row c matches every unmasked position of s
        consistent = np.ones((len(noisy), len(clean)), dtype=bool)
        for pos in range(N):
            col = noisy[:, pos][:, None]
            consistent &= (col == self.vocab.mask_id) | (col == clean[None, :, pos])
        mass = consistent @ w                                # (S,)
        table = np.empty((len(noisy), N, V))
        for pos in range(N):
            onehot = clean[:, pos][:, None] == np.arange(V)[None, :]   # (C, V)
            table[:, pos, :] = consistent @ (w[:, None] * onehot)
        zero = mass <= 0.0
        self._zero_mass = zero
        with np.errstate(invalid="ignore", divide="ignore"):
            table /= mass[:, None, None]
        table[zero] = 1.0 / V
        return table

    def predict(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        return self.predict_batch(np.asarray(x_t)[None, :], t)[0]

    def predict_batch(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        idx = encode_states(np.asarray(x_t), self._n_noisy)
        self.fallback_count += int(np.count_nonzero(self._zero_mass[idx]))
        return self._table[idx]


class TableDenoiser:
    """Denoiser backed by an explicit (S, N, V) table; used for ad-hoc kernels."""

    def __init__(self, vocab: Vocab, length: int, table: np.ndarray):
        self.vocab = vocab
        self.length = length
        self._table = np.asarray(table, dtype=np.float64)
        self._n_noisy = vocab.size + 1

    def predict(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        return self.predict_batch(np.asarray(x_t)[None, :], t)[0]

    def predict_batch(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        return self._table[encode_states(np.asarray(x_t), self._n_noisy)]


def _require_clean(x0: np.ndarray, vocab: Vocab) -> None:
    if np.any(np.asarray(x0) >= vocab.size):
        raise ValueError("sequence contains mask tokens where a clean sequence is required")


def forward_noise(x0: np.ndarray, t: int, sched: NoiseSchedule, vocab: Vocab,
                  rng: np.random.Generator) -> np.ndarray:
    """Corrupt a clean sequence to step t: keep each token w.p. alpha_t."""
    x0 = np.asarray(x0)
    _require_clean(x0, vocab)
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside 0..{sched.T}")
    keep = rng.random(x0.shape) < sched.alpha(t)
    return np.where(keep, x0, vocab.mask_id)


def reverse_probs(den_probs: np.ndarray, x_t: np.ndarray, t: int,
                  sched: NoiseSchedule, vocab: Vocab) -> np.ndarray:
    """Per-position reverse transition distributions, shape (..., N, V+1).

    Index V is the stay-mask outcome. Unmasked positions get a point mass on
    their current token. `den_probs` has shape (..., N, V).
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside 1..{sched.T}")
    a_prev, a_t = sched.alpha(t - 1), sched.alpha(t)
    stay = (1.0 - a_prev) / (1.0 - a_t)
    unmask = (a_prev - a_t) / (1.0 - a_t)
    x_t = np.asarray(x_t)
    out = np.zeros(den_probs.shape[:-1] + (vocab.size + 1,))
    out[..., : vocab.size] = unmask * den_probs
    out[..., vocab.size] = stay
    masked = x_t == vocab.mask_id
    # point mass on the current token at unmasked positions
    onehot = np.eye(vocab.size + 1)[np.minimum(x_t, vocab.size)]
    out = np.where(masked[..., None], out, onehot)
    return out


def reverse_step_dist(x_t: np.ndarray, t: int, den: Denoiser,
                      sched: NoiseSchedule) -> np.ndarray:
    """Reverse transition distribution for one sequence, shape (N, V+1)."""
    x_t = np.asarray(x_t)
    return reverse_probs(den.predict(x_t, t), x_t, t, sched, den.vocab)


def reverse_step_sample(x_t: np.ndarray, t: int, den: Denoiser, sched: NoiseSchedule,
                        rng: np.random.Generator) -> np.ndarray:
    """Sample x_{t-1} from the factorized reverse kernel."""
    return sample_categorical_rows(reverse_step_dist(x_t, t, den, sched), rng)


def reverse_step_sample_batch(x_t: np.ndarray, t: int, den: Denoiser,
                              sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    probs = reverse_probs(den.predict_batch(x_t, t), x_t, t, sched, den.vocab)
    return sample_categorical_rows(probs, rng)


def sample_reverse_batch(den: Denoiser, sched: NoiseSchedule, x_t: np.ndarray,
                         t_from: int, t_to: int, rng: np.random.Generator) -> np.ndarray:
    """Roll the reverse chain for a batch from step t_from down to t_to."""
    x = np.asarray(x_t)
    for t in range(t_from, t_to, -1):
        x = reverse_step_sample_batch(x, t, den, sched, rng)
    return x


def transition_logprob(x_t: np.ndarray, x_prev: np.ndarray, t: int, den: Denoiser,
                       sched: NoiseSchedule) -> float:
    """log p(x_prev | x_t) under the factorized reverse kernel.

    Transitions that edit an unmasked token (including re-masking one) are
    not representable and return -inf rather than raising.
    """
    return float(transition_logprob_batch(np.asarray(x_t)[None], np.asarray(x_prev)[None],
                                          t, den, sched)[0])


def transition_logprob_batch(x_t: np.ndarray, x_prev: np.ndarray, t: int,
                             den: Denoiser, sched: NoiseSchedule) -> np.ndarray:
    x_t, x_prev = np.asarray(x_t), np.asarray(x_prev)
    if x_t.shape != x_prev.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x_prev.shape}")
    probs = reverse_probs(den.predict_batch(x_t, t), x_t, t, sched, den.vocab)
    per_pos = np.take_along_axis(probs, x_prev[..., None], axis=-1)[..., 0]
    return np.sum(safe_log(per_pos), axis=-1)


def sample_base(den: Denoiser, sched: NoiseSchedule, rng: np.random.Generator,
                record_trajectory: bool = False):
    """Generate one clean sequence by running the reverse chain from all-mask.

    With record_trajectory=True returns (x0, trajectory) where trajectory is
    the list [x_T, ..., x_0].
    """
    x = np.full(den.length, den.vocab.mask_id, dtype=np.int64)
    traj = [x.copy()]
    for t in range(sched.T, 0, -1):
        x = reverse_step_sample(x, t, den, sched, rng)
        if record_trajectory:
            traj.append(x.copy())
    if record_trajectory:
        return x, traj
    return x


def sample_base_batch(den: Denoiser, sched: NoiseSchedule, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """n independent clean sequences from the base reverse chain, shape (n, N)."""
    x = np.full((n, den.length), den.vocab.mask_id, dtype=np.int64)
    return sample_reverse_batch(den, sched, x, sched.T, 0, rng)


# ---------------------------------------------------------------------------
# Learned denoiser
# ---------------------------------------------------------------------------

from . import nn  # noqa: E402  (nn has no diffusion dependency)


@dataclass
class DenoiserTrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


class MlpDenoiser:
    """Feed-forward denoiser on flattened per-position one-hot features.

    Produces N rows of V logits; prediction is the row-wise softmax. The
    input encoding includes the mask symbol, so timestep information is
    implicit in the mask pattern and t is ignored.
    """

    def __init__(self, vocab: Vocab, length: int, spec: nn.MlpSpec, params: np.ndarray):
        self.vocab = vocab
        self.length = length
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, vocab: Vocab, length: int, hidden: tuple[int, ...],
               rng: np.random.Generator) -> "MlpDenoiser":
        spec = nn.MlpSpec(
            input_dim=length * (vocab.size + 1),
            hidden=tuple(hidden),
            output_dim=length * vocab.size,
        )
        return cls(vocab, length, spec, nn.init_params(spec, rng))

    def features(self, x_t: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t)
        eye = np.eye(self.vocab.size + 1)
        return eye[x_t].reshape(x_t.shape[:-1] + (self.spec.input_dim,))

    def logits_batch(self, x_t: np.ndarray) -> np.ndarray:
        out = nn.forward_batch(self.spec, self.params, self.features(x_t))
        return out.reshape(x_t.shape[0], self.length, self.vocab.size)

    def predict(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        return self.predict_batch(np.asarray(x_t)[None], t)[0]

    def predict_batch(self, x_t: np.ndarray, t: int = 0) -> np.ndarray:
        logits = self.logits_batch(np.asarray(x_t))
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=-1, keepdims=True)


def denoiser_loss_batch(den: MlpDenoiser, x0: np.ndarray, x_t: np.ndarray,
                        t: int, sched: NoiseSchedule):
    """Masked cross-entropy at step t and its logit cotangent.

    Loss per example: w(t) * sum over masked positions of -log p[x0_pos]
    with w(t) = (alpha_{t-1} - alpha_t) / (1 - alpha_t); the batch loss is
    the mean. Returns (loss, dloss/dlogits).
    """
    a_prev, a_t = sched.alpha(t - 1), sched.alpha(t)
    w = (a_prev - a_t) / (1.0 - a_t)
    probs = den.predict_batch(x_t)                                   # (B, N, V)
    masked = (x_t == den.vocab.mask_id)                              # (B, N)
    p_true = np.take_along_axis(probs, x0[..., None], axis=-1)[..., 0]
    nll = np.where(masked, -safe_log(p_true), 0.0)
    loss = w * nll.sum(axis=-1).mean()
    onehot = np.eye(den.vocab.size)[x0]
    cot = w * masked[..., None] * (probs - onehot) / x0.shape[0]
    return loss, cot


def train_denoiser(data: DataDist, sched: NoiseSchedule,
                   cfg: DenoiserTrainConfig | None = None,
                   rng: np.random.Generator | None = None) -> MlpDenoiser:
    """Fit an MlpDenoiser to data by masked cross-entropy.

    Each step draws t uniformly in 1..T, corrupts a batch of clean samples to
    step t, and takes one AdamW step on the w(t)-weighted loss.
    """
    cfg = cfg or DenoiserTrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    den = MlpDenoiser.create(data.vocab, data.length, cfg.hidden, rng)
    opt = nn.AdamWState.create(den.spec, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        t = int(rng.integers(1, sched.T + 1))
        x0 = data.sample(cfg.batch_size, rng)
        keep = rng.random(x0.shape) < sched.alpha(t)
        x_t = np.where(keep, x0, data.vocab.mask_id)
        loss, cot = denoiser_loss_batch(den, x0, x_t, t, sched)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite denoiser loss at step {step}: {loss}")
        grad = nn.backward_batch(den.spec, den.params, den.features(x_t),
                                 cot.reshape(cfg.batch_size, -1))
        den.params = opt.step(den.params, grad)
    return den
