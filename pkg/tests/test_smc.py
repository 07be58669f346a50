"""Weight algebra, resampling, the full sampler, proposals, and best-of-n."""

import numpy as np
import pytest
from scipy import stats

from twistsmc import (
    BaseProposal,
    ConstantTwist,
    DataDist,
    ExactTwist,
    McTwist,
    McTwistConfig,
    NoiseSchedule,
    SmcConfig,
    TabularDenoiser,
    TiltedProposal,
    Vocab,
    best_of_n,
    ess,
    incremental_log_weight,
    multinomial_resample,
    tilted_proposal,
    token_count,
    twist_smc,
    tv,
)
from twistsmc.diffusion import encode_states, reverse_step_dist, transition_logprob_batch
from twistsmc.smc import ParticleSystem
from twistsmc.util import log_normalize, logsumexp


def weighted_empirical(oracle, states, weights):
    emp = np.zeros(len(oracle.states))
    np.add.at(emp, encode_states(states, oracle.vocab.size + 1), weights)
    return emp


# ---------------------------------------------------------------------------
# incremental weights
# ---------------------------------------------------------------------------

def test_unit_twist_base_proposal_weight_zero(toy, rng):
    prop = BaseProposal(toy.den, toy.sched)
    for _ in range(10):
        t = int(rng.integers(1, toy.sched.T + 1))
        x_t = rng.integers(0, 4, size=(1, 3))
        x_prev = prop.sample(x_t, t, rng)
        w = incremental_log_weight(x_t[0], x_prev[0], t, ConstantTwist(0.0),
                                   prop, toy.den, toy.sched)
        assert w == 0.0


def test_fast_path_equals_general_path(toy, toy_oracle, rng):
    # base-proposal shortcut vs the full ratio including kernel terms
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    base = BaseProposal(toy.den, toy.sched)
    # same kernel, but flagged as non-base so the ratio terms are computed
    general = TiltedProposal(toy.den, toy.sched)
    for _ in range(50):
        t = int(rng.integers(1, toy.sched.T + 1))
        x_t = rng.integers(0, 4, size=(1, 3))
        x_prev = base.sample(x_t, t, rng)
        w_fast = incremental_log_weight(x_t[0], x_prev[0], t, et, base, toy.den, toy.sched)
        w_full = incremental_log_weight(x_t[0], x_prev[0], t, et, general, toy.den, toy.sched)
        assert w_fast == pytest.approx(w_full, abs=1e-12)


def test_infeasible_transition_propagates_neg_inf(toy, toy_oracle):
    # the general path sees the kernel's zero probability; the base-proposal
    # fast path never encounters infeasible transitions (it samples them)
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    prop = TiltedProposal(toy.den, toy.sched)
    w = incremental_log_weight(np.array([0, 1, 2]), np.array([1, 1, 2]), 3,
                               et, prop, toy.den, toy.sched)
    assert w == -np.inf


# ---------------------------------------------------------------------------
# ESS and resampling
# ---------------------------------------------------------------------------

def test_ess_values():
    assert ess(log_normalize(np.zeros(8))) == pytest.approx(8.0)
    one_hot = np.log(np.array([1.0, 1e-300, 1e-300]))
    assert ess(log_normalize(one_hot)) == pytest.approx(1.0)
    assert ess(np.log(np.array([0.75, 0.25]))) == pytest.approx(1.6)


def _system(states, weights, t=3):
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(weights, dtype=float))
    return ParticleSystem(states=np.asarray(states), t=t, log_weights=log_w)


def test_resample_point_mass_clones_winner(rng):
    states = np.array([[0, 0], [1, 1], [2, 2]])
    sys = _system(states, [0.0, 1.0, 0.0])
    multinomial_resample(sys, rng)
    assert np.all(sys.states == [1, 1])
    assert np.all(sys.log_weights == 0.0)
    assert sys.K == 3 and sys.t == 3


def test_resample_uniform_chi_square():
    rng = np.random.default_rng(0)
    K = 5
    counts = np.zeros(K)
    trials = 10_000
    for _ in range(trials):
        sys = _system(np.arange(K)[:, None], np.full(K, 1.0 / K))
        multinomial_resample(sys, rng)
        np.add.at(counts, sys.states[:, 0], 1)
    _, p = stats.chisquare(counts)
    assert p > 0.001


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

def test_unit_twist_gives_base_samples_uniform_weights(toy, toy_oracle):
    res = twist_smc(SmcConfig(10_000, 0.5, t_stop=2), BaseProposal(toy.den, toy.sched),
                    ConstantTwist(0.0), toy.den, toy.sched, np.random.default_rng(0))
    assert np.all(res.log_weights == res.log_weights[0])  # exactly uniform
    assert res.resample_steps == []
    emp = weighted_empirical(toy_oracle, res.states, res.weights)
    assert tv(emp, toy_oracle.exact_base_marginal(2).probs) < 0.05


def test_exact_twist_smc_converges_to_target(toy, toy_oracle):
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    res = twist_smc(SmcConfig(4000, 0.5, 0), BaseProposal(toy.den, toy.sched),
                    et, toy.den, toy.sched, np.random.default_rng(1))
    emp = weighted_empirical(toy_oracle, res.states, res.weights)
    assert tv(emp, toy_oracle.exact_target(toy.reward, toy.beta, 0).probs) < 0.06


def test_weight_normalization_invariant(toy, toy_oracle):
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    res = twist_smc(SmcConfig(500, 0.5, 0), BaseProposal(toy.den, toy.sched),
                    et, toy.den, toy.sched, np.random.default_rng(2))
    assert abs(logsumexp(res.log_weights)) < 1e-10


def test_resample_trigger_thresholds(toy, toy_oracle):
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    prop = BaseProposal(toy.den, toy.sched)
    res0 = twist_smc(SmcConfig(200, 0.0, 0), prop, et, toy.den, toy.sched,
                     np.random.default_rng(3))
    assert res0.resample_steps == []
    res1 = twist_smc(SmcConfig(200, 1.0, 0), prop, et, toy.den, toy.sched,
                     np.random.default_rng(3))
    # nonconstant twist => ESS < K at every continuing step
    assert res1.resample_steps == list(range(toy.sched.T - 1, 0, -1))


def test_degenerate_system_fails_loudly(toy):
    class DoomTwist:
        def log_psi(self, x, t):
            return -np.inf

        def log_psi_batch(self, xs, t):
            return np.full(len(xs), -np.inf)

    with pytest.raises(RuntimeError, match="degenerate particle system"):
        twist_smc(SmcConfig(16, 0.5, 0), BaseProposal(toy.den, toy.sched),
                  DoomTwist(), toy.den, toy.sched, np.random.default_rng(0))


def test_is_mode_telescoping_identity(toy, toy_oracle):
    # cumulative IS weights must equal the post-hoc direct computation
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    prop = tilted_proposal(toy.data, toy.reward, 1.0, toy.sched)
    res = twist_smc(SmcConfig(100, 0.0, 0, record_trajectories=True), prop, et,
                    toy.den, toy.sched, np.random.default_rng(4))
    recomputed = et.log_psi_batch(res.states, 0).astype(float)
    for i, t in enumerate(range(toy.sched.T, 0, -1)):
        x_t, x_prev = res.trajectories[i], res.trajectories[i + 1]
        recomputed += transition_logprob_batch(x_t, x_prev, t, toy.den, toy.sched)
        recomputed -= prop.logprob(x_t, x_prev, t)
    np.testing.assert_allclose(res.raw_log_weights, recomputed, atol=1e-9)
    toy.reward.reset_ledger()


def test_ledger_pricing(toy):
    K, M, T = 40, 3, toy.sched.T
    toy.reward.reset_ledger()
    mc = McTwist(toy.den, toy.sched, toy.reward, McTwistConfig(M=M, beta=toy.beta, seed=0))
    twist_smc(SmcConfig(K, 1.0, 0), BaseProposal(toy.den, toy.sched), mc,
              toy.den, toy.sched, np.random.default_rng(0))
    assert toy.reward.calls == K * M * T
    toy.reward.reset_ledger()
    twist_smc(SmcConfig(K, 1.0, 3), BaseProposal(toy.den, toy.sched), mc,
              toy.den, toy.sched, np.random.default_rng(0))
    assert toy.reward.calls == K * M * (T - 3)
    toy.reward.reset_ledger()
    twist_smc(SmcConfig(K, 0.0, 0), BaseProposal(toy.den, toy.sched), mc,
              toy.den, toy.sched, np.random.default_rng(0))
    assert toy.reward.calls == K * M
    toy.reward.reset_ledger()


# ---------------------------------------------------------------------------
# tilted proposal
# ---------------------------------------------------------------------------

def test_tilted_proposal_large_beta_matches_base(toy, rng):
    prop = tilted_proposal(toy.data, toy.reward, 1e9, toy.sched)
    for _ in range(10):
        t = int(rng.integers(1, toy.sched.T + 1))
        x = rng.integers(0, 4, size=3)
        a = reverse_step_dist(x, t, prop.den, toy.sched)
        b = reverse_step_dist(x, t, toy.den, toy.sched)
        np.testing.assert_allclose(a, b, atol=1e-6)
    toy.reward.reset_ledger()


def test_tilted_proposal_logprob_brute_force(toy, rng):
    import itertools
    prop = tilted_proposal(toy.data, toy.reward, 1.0, toy.sched)
    x_t = np.array([toy.vocab.mask_id, 0, toy.vocab.mask_id])
    t = 4
    dist = reverse_step_dist(x_t, t, prop.den, toy.sched)
    total = 0.0
    for nxt in itertools.product(range(4), repeat=3):
        p = float(np.prod([dist[i, s] for i, s in enumerate(nxt)]))
        lp = float(prop.logprob(x_t[None], np.array(nxt)[None], t)[0])
        if p > 0:
            assert lp == pytest.approx(np.log(p), abs=1e-12)
            total += p
        else:
            assert lp == -np.inf
    assert total == pytest.approx(1.0, abs=1e-12)
    toy.reward.reset_ledger()


def test_proposal_invariance_of_target(toy, toy_oracle):
    et = ExactTwist(toy_oracle, toy.reward, toy.beta)
    target = toy_oracle.exact_target(toy.reward, toy.beta, 0).probs
    tilted = tilted_proposal(toy.data, toy.reward, 1.0, toy.sched)
    res_t = twist_smc(SmcConfig(4000, 0.5, 0), tilted, et, toy.den, toy.sched,
                      np.random.default_rng(7))
    emp = weighted_empirical(toy_oracle, res_t.states, res_t.weights)
    assert tv(emp, target) < 0.06
    toy.reward.reset_ledger()


# ---------------------------------------------------------------------------
# best-of-n
# ---------------------------------------------------------------------------

def test_best_of_one_is_plain_base_sample(toy):
    x1 = best_of_n(1, toy.den, toy.sched, toy.reward, np.random.default_rng(11))
    x2 = twist_smc(SmcConfig(1, 0.0, 0), BaseProposal(toy.den, toy.sched),
                   ConstantTwist(0.0), toy.den, toy.sched,
                   np.random.default_rng(11)).states[0]
    assert np.array_equal(x1, x2)  # same rng stream, same single rollout
    toy.reward.reset_ledger()


def test_best_of_n_point_mass(rng):
    vocab = Vocab(3)
    x_star = np.array([2, 1, 0])
    den = TabularDenoiser(DataDist.point_mass(vocab, x_star))
    sched = NoiseSchedule.linear(6)
    r = token_count(vocab, 2)
    for n in (1, 4, 16):
        assert np.array_equal(best_of_n(n, den, sched, r, rng), x_star)


def test_best_of_n_trend(toy):
    means = {}
    for n in (1, 4, 16):
        vals = []
        for seed in range(200):
            rng = np.random.default_rng((n, seed))
            vals.append(toy.reward(best_of_n(n, toy.den, toy.sched, toy.reward, rng)))
        means[n] = np.mean(vals)
    assert means[1] <= means[4] <= means[16]
    toy.reward.reset_ledger()


def test_best_of_n_ledger(toy):
    toy.reward.reset_ledger()
    best_of_n(9, toy.den, toy.sched, toy.reward, np.random.default_rng(0))
    assert toy.reward.calls == 9
    toy.reward.reset_ledger()
