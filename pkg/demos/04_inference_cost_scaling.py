"""Why the twist is the cost bottleneck, and what amortization buys.

Without a closed-form estimate of the clean sample, the twist must be
approximated by Monte Carlo: M completions and M reward calls per particle
per step. The call ledger makes the bill explicit: K*M*T reward calls per
run, and simulated wall-clock grows linearly in M when each reward call
carries latency. A learned head evaluates the twist with zero reward calls.
"""

import numpy as np

from twistsmc import (
    BaseProposal,
    DataDist,
    LearnedTwist,
    McTwist,
    McTwistConfig,
    NoiseSchedule,
    SmcConfig,
    TabularDenoiser,
    Vocab,
    token_count,
    twist_smc,
    with_latency,
)

vocab = Vocab(3)
data = DataDist.from_marginals(vocab, np.array([[0.05, 0.70, 0.25],
                                                [0.25, 0.15, 0.60],
                                                [0.45, 0.35, 0.20]]))
sched = NoiseSchedule.linear(8)
den = TabularDenoiser(data)
K, latency_ms = 128, 25.0

print(f"= Monte-Carlo twist: K={K} particles, T={sched.T} steps, "
      f"{latency_ms:.0f} ms simulated latency per reward call =")
for M in (1, 2, 4, 8):
    r = with_latency(token_count(vocab, 0), latency_ms)
    mc = McTwist(den, sched, r, McTwistConfig(M=M, beta=0.5, seed=M))
    res = twist_smc(SmcConfig(K, 1.0, 0), BaseProposal(den, sched), mc, den, sched,
                    np.random.default_rng(M))
    calls, sim_s = r.calls, r.simulated_ms / 1e3
    mean_r = float(res.weights @ r.batch(res.states))  # measurement, after the bill
    print(f"  M={M}: reward calls = {K}*{M}*{sched.T} = {calls:>6}"
          f"  simulated reward time = {sim_s:8.1f} s  mean reward = {mean_r:.3f}")

print("\n= importance sampling telescopes: the twist is needed once =")
r = with_latency(token_count(vocab, 0), latency_ms)
mc = McTwist(den, sched, r, McTwistConfig(M=4, beta=0.5, seed=0))
twist_smc(SmcConfig(K, 0.0, 0), BaseProposal(den, sched), mc, den, sched,
          np.random.default_rng(0))
print(f"  IS mode at M=4: {r.calls} reward calls (= K*M) instead of {K*4*sched.T}")

print("\n= a learned twist head amortizes the whole bill =")
r = with_latency(token_count(vocab, 0), latency_ms)
head = LearnedTwist.create(vocab, sched.T)
twist_smc(SmcConfig(K, 1.0, 0), BaseProposal(den, sched), head, den, sched,
          np.random.default_rng(0))
print(f"  sampling-time reward calls = {r.calls}; head arithmetic is a few small matmuls")
