"""Enumeration-oracle correctness, checked against even more naive oracles."""

import itertools

import numpy as np
import pytest

from twistsmc import (
    DataDist,
    DistTable,
    ExactOracle,
    NoiseSchedule,
    TabularDenoiser,
    Vocab,
    kl,
    motif_count,
    pattern_match,
    token_count,
    tv,
)
from twistsmc.diffusion import StateSpaceTooLarge, reverse_step_dist

V2, V3 = Vocab(2), Vocab(3)


def make_oracle(vocab, length, T, rng, product=True):
    data = (DataDist.random_product(vocab, length, rng) if product
            else DataDist.random_table(vocab, length, rng))
    den = TabularDenoiser(data)
    return data, den, ExactOracle(den, NoiseSchedule.linear(T))


# ---------------------------------------------------------------------------
# base marginals
# ---------------------------------------------------------------------------

def test_marginal_at_T_is_mask_point_mass(rng):
    _, _, oracle = make_oracle(V3, 2, 6, rng)
    table = oracle.exact_base_marginal(6)
    idx = np.argmax(table.probs)
    assert table.probs[idx] == pytest.approx(1.0)
    assert np.all(oracle.states[idx] == V3.mask_id)


def test_marginal_normalized_at_every_t(rng):
    _, _, oracle = make_oracle(V3, 2, 6, rng)
    for t in range(7):
        assert abs(oracle.exact_base_marginal(t).probs.sum() - 1.0) < 1e-10


def test_marginal_t0_equals_data_product(rng):
    for seed in range(3):
        data, _, oracle = make_oracle(V3, 3, 8, np.random.default_rng(seed))
        np.testing.assert_allclose(oracle.base_marginal_clean(0), data.probs, atol=1e-10)


def test_marginal_t0_correlated_gap_decays_with_T(rng):
    # with correlated data the factorized kernel is not the exact reversal;
    # the t=0 gap is O(1/T) and must shrink as the grid refines
    data = DataDist.random_table(V2, 2, np.random.default_rng(0))
    den = TabularDenoiser(data)
    gaps = []
    for T in (2, 8, 32):
        oracle = ExactOracle(den, NoiseSchedule.linear(T))
        gaps.append(0.5 * np.abs(oracle.base_marginal_clean(0) - data.probs).sum())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < gaps[0] / 4


def test_state_cap_refused():
    data = DataDist.uniform(V3, 3)
    with pytest.raises(StateSpaceTooLarge):
        ExactOracle(TabularDenoiser(data), NoiseSchedule.linear(4), cap=10)


# ---------------------------------------------------------------------------
# posterior reward moment / value / twist
# ---------------------------------------------------------------------------

def _enumerate_completion_moment(den, sched, r, beta, x, t):
    """Brute force: enumerate every reverse trajectory from (x, t) to 0."""
    if t == 0:
        return np.exp(r(x) / beta)
    dist = reverse_step_dist(x, t, den, sched)
    total = 0.0
    outcomes = [range(den.vocab.size + 1)] * den.length
    for nxt in itertools.product(*outcomes):
        p = float(np.prod([dist[i, s] for i, s in enumerate(nxt)]))
        if p > 0:
            total += p * _enumerate_completion_moment(den, sched, r, beta,
                                                      np.array(nxt), t - 1)
    return total


def test_moment_matches_trajectory_enumeration(rng):
    data, den, oracle = make_oracle(V2, 2, 3, rng, product=False)
    r = token_count(V2, 1)
    beta = 0.7
    for x in ([V2.mask_id, V2.mask_id], [0, V2.mask_id], [1, 0]):
        x = np.array(x)
        want = _enumerate_completion_moment(den, oracle.sched, r, beta, x, 2)
        got = oracle.exact_posterior_r_moment(r, beta, 2, x)
        assert got == pytest.approx(want, rel=1e-10)


def test_moment_fully_unmasked_is_deterministic(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    r = token_count(V3, 0)
    x = np.array([0, 2])
    for t in range(6):
        assert oracle.exact_posterior_r_moment(r, 1.3, t, x) == pytest.approx(
            np.exp(r(x) / 1.3), rel=1e-12)


def test_constant_reward_passes_through(rng):
    from twistsmc.rewards import RewardFn
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    c = 0.37
    r = RewardFn("const", lambda xs: np.full(len(xs), c), V3)
    for t in (0, 2, 5):
        for x in ([0, 1], [V3.mask_id, 2], [V3.mask_id, V3.mask_id]):
            if t == 0 and V3.mask_id in x:
                continue  # masked states have no completions at t=0
            got = oracle.exact_posterior_r_moment(r, 0.5, t, np.array(x))
            assert got == pytest.approx(np.exp(c / 0.5), rel=1e-12)


def test_value_definition_and_bounds(rng):
    _, _, oracle = make_oracle(V3, 2, 6, rng)
    r = token_count(V3, 2)
    beta = 0.4
    rmin, rmax = 0.0, 1.0
    for t in range(7):
        for _ in range(5):
            hi = V3.size + 1 if t > 0 else V3.size  # no masks at t=0
            x = rng.integers(0, hi, size=2)
            v = oracle.exact_value(r, beta, t, x)
            lt = oracle.exact_log_twist(r, beta, t, x)
            assert v == pytest.approx(beta * lt, rel=1e-12)
            assert rmin - 1e-9 <= v <= rmax + 1e-9  # log-sum-exp bounds
    # t=0: value equals the reward itself
    x0 = np.array([2, 0])
    assert oracle.exact_value(r, beta, 0, x0) == pytest.approx(r(x0), rel=1e-12)


# ---------------------------------------------------------------------------
# targets and tilts
# ---------------------------------------------------------------------------

def test_target_large_beta_recovers_base(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    r = token_count(V3, 0)
    for t in (0, 2, 4):
        assert tv(oracle.exact_target(r, 1e6, t), oracle.exact_base_marginal(t)) < 1e-4


def test_constant_reward_neutrality(rng):
    from twistsmc.rewards import RewardFn
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    r = RewardFn("const", lambda xs: np.full(len(xs), -1.1), V3)
    for t in range(6):
        assert tv(oracle.exact_target(r, 0.3, t), oracle.exact_base_marginal(t)) < 1e-12


def test_target_t0_is_direct_softmax_tilt(rng):
    data, _, oracle = make_oracle(V3, 2, 5, rng)
    r = motif_count(V3, np.array([1, 1]))
    beta = 0.5
    target = oracle.exact_target(r, beta, 0)
    # independent direct computation on the clean table
    tilt = data.probs * np.exp(r.batch(data.states) / beta)
    tilt /= tilt.sum()
    np.testing.assert_allclose(target.probs[oracle.clean_idx], tilt, atol=1e-12)


def test_tilted_zero_twist_is_base(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    zero = np.zeros(len(oracle.states))
    for t in (1, 3):
        assert tv(oracle.exact_tilted(zero, t), oracle.exact_base_marginal(t)) == 0.0


def test_tilted_with_exact_twist_is_target(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    r = token_count(V3, 1)
    for t in (0, 2, 5):
        log_psi = oracle._log_twist_table(r, 0.5)[t]
        assert tv(oracle.exact_tilted(log_psi, t), oracle.exact_target(r, 0.5, t)) < 1e-12


def test_tilted_shift_invariance(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    log_psi = rng.normal(size=len(oracle.states))
    a = oracle.exact_tilted(log_psi, 3)
    b = oracle.exact_tilted(log_psi + 2.5, 3)
    assert tv(a, b) < 1e-12
    assert b.log_normalizer - a.log_normalizer == pytest.approx(2.5, abs=1e-9)


def test_twist_consistency_recovered_from_target(rng):
    # log psi computed by DP == log(p*/p_base) + log Z wherever p_base > 0
    _, _, oracle = make_oracle(V3, 2, 6, rng)
    r = token_count(V3, 0)
    beta = 0.5
    for t in (1, 3, 5):
        target = oracle.exact_target(r, beta, t)
        base = oracle.exact_base_marginal(t)
        ok = base.probs > 1e-12
        recovered = (target.log_probs - base.log_probs + target.log_normalizer)[ok]
        direct = oracle._log_twist_table(r, beta)[t][ok]
        np.testing.assert_allclose(recovered, direct, atol=1e-8)


# ---------------------------------------------------------------------------
# forward decomposition of the target
# ---------------------------------------------------------------------------

def test_forward_decomposition_identity_grid():
    # tabular denoiser + product data: identity holds at every t to 1e-10
    for V, N in [(2, 2), (2, 3), (3, 2), (3, 3)]:
        vocab = Vocab(V)
        rng = np.random.default_rng(V * 10 + N)
        data = DataDist.random_product(vocab, N, rng)
        den = TabularDenoiser(data)
        for T in (4, 8):
            oracle = ExactOracle(den, NoiseSchedule.linear(T))
            rewards = [token_count(vocab, 0),
                       pattern_match(vocab, np.zeros(N, dtype=int)),
                       motif_count(vocab, np.array([0, 0]))]
            for r in rewards:
                for beta in (0.2, 1.0, 5.0):
                    for t in range(T + 1):
                        d = tv(oracle.forward_decomposition(r, beta, t),
                               oracle.exact_target(r, beta, t))
                        assert d < 1e-10, (V, N, T, r.name, beta, t, d)


def test_forward_decomposition_endpoints(rng):
    _, _, oracle = make_oracle(V3, 2, 5, rng)
    r = token_count(V3, 0)
    fd0 = oracle.forward_decomposition(r, 0.5, 0)
    assert tv(fd0, oracle.exact_target(r, 0.5, 0)) < 1e-12
    fdT = oracle.forward_decomposition(r, 0.5, 5)
    assert fdT.probs[np.all(oracle.states == V3.mask_id, axis=1)][0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# divergences
# ---------------------------------------------------------------------------

def test_kl_tv_basics():
    assert kl(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    assert tv(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    assert kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.log(2))
    assert kl(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == np.inf


def test_kl_nonnegative_and_pinsker(rng):
    for _ in range(200):
        n = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        d = kl(p, q)
        assert d >= -1e-12
        assert tv(p, q) <= np.sqrt(d / 2) + 1e-12


def test_disttable_requires_normalization():
    with pytest.raises(ValueError):
        DistTable(np.zeros((2, 1), dtype=int), np.log(np.array([0.4, 0.4])))
