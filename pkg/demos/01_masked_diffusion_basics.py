"""Masked diffusion in five minutes: corruption, reversal, and exactness.

A sequence is corrupted by independently masking each token with growing
probability; sampling runs the learned (here: exact tabular) reverse kernel
from the all-mask state back to a clean sequence. On a small vocabulary we
can enumerate everything and check the chain end to end.
"""

import numpy as np

from twistsmc import (
    DataDist,
    ExactOracle,
    NoiseSchedule,
    TabularDenoiser,
    Vocab,
    forward_noise,
    reverse_step_dist,
    sample_base,
)

rng = np.random.default_rng(0)
vocab = Vocab(3)                      # tokens 0..2, mask symbol = 3
sched = NoiseSchedule.linear(8)       # alpha_t = 1 - t/8

print("= forward corruption =")
x0 = np.array([0, 1, 2])
for t in (0, 2, 4, 6, 8):
    print(f"  t={t}: alpha={sched.alpha(t):.3f} ->", forward_noise(x0, t, sched, vocab, rng))

# a product data distribution with position-dependent marginals
marginals = np.array([[0.05, 0.70, 0.25],
                      [0.25, 0.15, 0.60],
                      [0.45, 0.35, 0.20]])
data = DataDist.from_marginals(vocab, marginals)
den = TabularDenoiser(data)           # exact posterior per masked position

print("\n= one reverse step from a partially masked state =")
x_t = np.array([vocab.mask_id, 0, vocab.mask_id])
dist = reverse_step_dist(x_t, 4, den, sched)
for pos in range(3):
    print(f"  position {pos}: P(tokens 0..2, stay-mask) =", np.round(dist[pos], 3))

print("\n= samples from the reverse chain =")
for _ in range(5):
    print(" ", sample_base(den, sched, rng))

print("\n= exactness: the chain's t=0 marginal vs the data table =")
oracle = ExactOracle(den, sched)
err = np.abs(oracle.base_marginal_clean(0) - data.probs).max()
print(f"  max elementwise error = {err:.2e} (product data: exact reversal)")
