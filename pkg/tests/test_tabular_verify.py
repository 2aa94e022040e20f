import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import bayes_posterior, enumerate_marginals, kl, monte_carlo_occupancy
from vmail.envs import HistoryPolicy, TabularPOMDP, random_state_policy, random_tabular_pomdp
from vmail.tabular_verify import (
    CAMPAIGNS,
    DIVERGENCES,
    EnumerationBudgetError,
    ImpossibleHistoryError,
    OccupancyMeasure,
    SupportMismatchError,
    belief_filter,
    check_lemma1,
    check_suboptimality_bound,
    check_theorem1,
    discounted_occupancy_mdp,
    f_divergence,
    history_index,
    occupancy_power_iteration,
    optimal_discriminator,
    policy_value,
    trajectory_law,
)

LN2 = math.log(2.0)


def chain_mdp(gamma=0.5):
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = T[1, 0, 1] = 1.0
    return TabularPOMDP(T=T, U=np.eye(2), R=np.array([[0.0], [1.0]]), mu0=np.array([1.0, 0.0]), gamma=gamma)


# -- occupancy --------------------------------------------------------------


def test_single_state_occupancy():
    p = random_tabular_pomdp((1, 1, 1), seed=0)
    np.testing.assert_allclose(discounted_occupancy_mdp(p, np.ones((1, 1))).probs, [[1.0]])


def test_two_state_chain_closed_form():
    rho = discounted_occupancy_mdp(chain_mdp(0.5), np.ones((2, 1))).probs
    np.testing.assert_allclose(rho, [[0.5], [0.5]], atol=1e-15)


def test_linear_solve_matches_monte_carlo():
    p = random_tabular_pomdp((4, 2, 1), seed=3, gamma=0.9)
    pol = random_state_policy(4, 2, np.random.default_rng(1))
    exact = discounted_occupancy_mdp(p, pol).probs
    mc = monte_carlo_occupancy(p, pol, episodes=100_000, seed=9)
    assert np.abs(exact - mc).sum() <= 1e-2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), S=st.integers(1, 6), A=st.integers(1, 3), steps=st.integers(5, 60))
def test_power_iteration_within_truncation_bound(seed, S, A, steps):
    p = random_tabular_pomdp((S, A, 1), seed)
    pol = random_state_policy(S, A, np.random.default_rng(seed))
    exact = discounted_occupancy_mdp(p, pol).probs
    approx = occupancy_power_iteration(p, pol, steps)
    assert np.abs(exact - approx).sum() <= 2 * p.gamma ** steps + 1e-12


def test_policy_value_identity():
    p = chain_mdp(0.5)
    # reward 1 from t = 1 onward: sum_{t>=1} 0.5^t = 1
    assert policy_value(p, np.ones((2, 1))) == pytest.approx(1.0, abs=1e-14)


# -- trajectory law ---------------------------------------------------------


def test_law_deterministic_single_action_is_point_mass():
    p = chain_mdp(0.9)
    law = trajectory_law(p, HistoryPolicy.constant(np.ones(1), 2, 4), 4)
    for t in range(4):
        probs = law.history_probs(t)
        assert np.count_nonzero(probs) == 1 and probs.max() == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), S=st.integers(1, 4), X=st.integers(1, 3), A=st.integers(1, 2),
       T=st.integers(1, 4))
def test_law_total_mass_and_marginals_match_brute_force(seed, S, X, A, T):
    p = random_tabular_pomdp((S, A, X), seed)
    pol = HistoryPolicy.random(X, A, T, np.random.default_rng(seed))
    law = trajectory_law(p, pol, T)
    assert law.total_mass() == pytest.approx(1.0, abs=1e-10)
    for rho in (law.rho_sa(), law.rho_xa(), law.rho_ha()):
        assert rho.sum() == pytest.approx(1.0, abs=1e-10)

    def policy_fn(obs, acts):
        return pol.probs(len(acts))[history_index(obs, acts, X, A)]

    xa, sa, ha = enumerate_marginals(p, policy_fn, T)
    np.testing.assert_allclose(law.rho_xa(), xa, atol=1e-12)
    np.testing.assert_allclose(law.rho_sa(), sa, atol=1e-12)
    flat = law.rho_ha()
    offsets = np.cumsum([0] + [X * (X * A) ** t * A for t in range(T)])
    for (t, obs, acts, a), v in ha.items():
        assert flat[offsets[t] + history_index(obs, acts, X, A) * A + a] == pytest.approx(v, abs=1e-12)


def test_enumeration_budget():
    p = random_tabular_pomdp((2, 2, 4), seed=0)
    pol = HistoryPolicy.constant(np.array([0.5, 0.5]), 4, 3)
    with pytest.raises(EnumerationBudgetError):
        trajectory_law(p, pol, 3, budget=100)


def test_fully_observable_obs_equals_state():
    base = random_tabular_pomdp((3, 2, 3), seed=4)
    p = TabularPOMDP(T=base.T, U=np.eye(3), R=base.R, mu0=base.mu0, gamma=0.9)
    rng = np.random.default_rng(0)
    law = trajectory_law(p, HistoryPolicy.random(3, 2, 4, rng), 4)
    np.testing.assert_allclose(law.rho_xa(), law.rho_sa(), atol=1e-15)


# -- belief filter ----------------------------------------------------------


def test_belief_filter_hand_computed_hmm():
    mu0 = np.array([0.6, 0.4])
    U = np.array([[0.9, 0.1], [0.2, 0.8]])
    T = np.array([[[0.7, 0.3]], [[0.4, 0.6]]])
    p = TabularPOMDP(T=T, U=U, R=np.zeros((2, 1)), mu0=mu0, gamma=0.9)
    # b0 = (27/31, 4/31); predicted (20.5/31, 10.5/31); updated by U[:, 1] -> (41/209, 168/209)
    b = belief_filter(p, [0, 1], [0])
    expected = [float(Fraction(41, 209)), float(Fraction(168, 209))]
    np.testing.assert_allclose(b, expected, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), S=st.integers(1, 4), X=st.integers(1, 3), A=st.integers(1, 2),
       n=st.integers(1, 5))
def test_belief_filter_matches_path_enumeration(seed, S, X, A, n):
    p = random_tabular_pomdp((S, A, X), seed)
    rng = np.random.default_rng(seed)
    obs, acts = list(rng.integers(X, size=n)), list(rng.integers(A, size=n - 1))
    np.testing.assert_allclose(belief_filter(p, obs, acts), bayes_posterior(p.mu0, p.T, p.U, obs, acts),
                               atol=1e-12)


def test_belief_filter_base_cases():
    p = random_tabular_pomdp((3, 2, 3), seed=1)
    np.testing.assert_array_equal(belief_filter(p, []), p.mu0)
    b0 = p.mu0 * p.U[:, 2]
    np.testing.assert_allclose(belief_filter(p, [2]), b0 / b0.sum())
    full = TabularPOMDP(T=p.T, U=np.eye(3), R=p.R, mu0=p.mu0, gamma=0.9)
    np.testing.assert_allclose(belief_filter(full, [0, 2, 1], [1, 0]), [0, 1, 0])


def test_impossible_history():
    T = np.zeros((2, 1, 2))
    T[:, 0, 0] = 1.0
    p = TabularPOMDP(T=T, U=np.eye(2), R=np.zeros((2, 1)), mu0=np.array([1.0, 0.0]), gamma=0.9)
    with pytest.raises(ImpossibleHistoryError):
        belief_filter(p, [0, 1], [0])


# -- divergences ------------------------------------------------------------


def test_divergence_hand_values():
    assert f_divergence([0.5, 0.5], [0.75, 0.25], "TV") == pytest.approx(0.25, abs=1e-15)
    assert f_divergence([0.5, 0.5], [0.25, 0.75], "KL") == pytest.approx(0.14384103622589045, abs=1e-12)
    assert f_divergence([0.5, 0.5], [0.25, 0.75], "KL") == pytest.approx(kl([0.5, 0.5], [0.25, 0.75]))
    assert f_divergence([1.0, 0.0], [0.0, 1.0], "JS") == pytest.approx(LN2)
    assert f_divergence([1.0, 0.0], [0.5, 0.5], "KL") == pytest.approx(LN2)
    assert f_divergence([0.5, 0.5], [1.0, 0.0], "KL") == math.inf


def test_divergence_errors():
    with pytest.raises(SupportMismatchError):
        f_divergence([0.5, 0.5], [1.0, 0.0, 0.0], "TV")
    with pytest.raises(SupportMismatchError):
        f_divergence(OccupancyMeasure(np.ones(2) / 2, "sa"), OccupancyMeasure(np.ones(2) / 2, "xa"), "TV")
    with pytest.raises(ValueError):
        f_divergence([1.0], [1.0], "Hellinger")


dist = st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0, 1), min_size=n, max_size=n)))


def _normalize(v):
    v = np.asarray(v)
    assume(v.sum() > 1e-6)
    return v / v.sum()


@given(pq=dist, kind=st.sampled_from(DIVERGENCES))
def test_divergence_nonnegative_and_zero_on_equal(pq, kind):
    p, q = _normalize(pq[0]), _normalize(pq[1])
    assert f_divergence(p, p, kind) == pytest.approx(0.0, abs=1e-12)
    assert f_divergence(p, q, kind) >= 0.0


@given(pq=dist)
def test_js_symmetric_and_bounded(pq):
    p, q = _normalize(pq[0]), _normalize(pq[1])
    assert f_divergence(p, q, "JS") == pytest.approx(f_divergence(q, p, "JS"), abs=1e-12)
    assert f_divergence(p, q, "JS") <= LN2


@given(pq=dist, kind=st.sampled_from(DIVERGENCES), data=st.data())
def test_data_processing_under_coarsening(pq, kind, data):
    p, q = _normalize(pq[0]), _normalize(pq[1])
    k = data.draw(st.integers(1, len(p)))
    g = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=len(p), max_size=len(p))))
    gp, gq = np.bincount(g, p, minlength=k), np.bincount(g, q, minlength=k)
    coarse, fine = f_divergence(gp, gq, kind), f_divergence(p, q, kind)
    assert coarse <= fine + 1e-9 or fine == math.inf


# -- discriminator identity -------------------------------------------------


def test_optimal_discriminator_equal_and_disjoint():
    p = np.array([0.2, 0.3, 0.5])
    d, value = optimal_discriminator(p, p)
    np.testing.assert_allclose(d, 0.5)
    assert value == pytest.approx(2 * LN2, abs=1e-12)
    d, value = optimal_discriminator([0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5])
    np.testing.assert_array_equal(d, [1, 1, 0, 0])
    assert value == pytest.approx(0.0, abs=1e-15)


@given(pq=dist)
def test_optimal_discriminator_js_identity(pq):
    p, q = _normalize(pq[0]), _normalize(pq[1])
    _, value = optimal_discriminator(p, q)
    assert abs(value - (2 * LN2 - 2 * f_divergence(p, q, "JS"))) <= 1e-10


# -- bounds -----------------------------------------------------------------


def test_bounds_trivial_cases():
    p = random_tabular_pomdp((4, 2, 1), seed=2)
    pol = random_state_policy(4, 2, np.random.default_rng(0))
    chk = check_suboptimality_bound(p, pol, pol)
    assert chk.lhs == pytest.approx(0.0, abs=1e-12) and chk.rhs == pytest.approx(0.0, abs=1e-12) and chk.holds
    chk = check_lemma1(p, pol, pol, 0.0, seed=1)
    assert chk.lhs == pytest.approx(0.0, abs=1e-12) and chk.rhs == pytest.approx(0.0, abs=1e-12)
    other = random_state_policy(4, 2, np.random.default_rng(1))
    chk = check_lemma1(p, pol, other, 1.0, seed=1)
    assert chk.rhs >= p.r_max / (1 - p.gamma) ** 2 - 1e-12 and chk.holds
    with pytest.raises(ValueError):
        check_lemma1(p, pol, other, 1.5, seed=1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.sampled_from([0.0, 0.05, 0.1, 0.3, 1.0]))
def test_bounds_hold_on_random_instances(seed, alpha):
    rng = np.random.default_rng(seed)
    S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    p = random_tabular_pomdp((S, A, 1), seed)
    e, pi = random_state_policy(S, A, rng), random_state_policy(S, A, rng)
    assert check_suboptimality_bound(p, e, pi).rhs >= 0
    assert check_suboptimality_bound(p, e, pi).holds
    assert check_lemma1(p, e, pi, alpha, seed).holds


def test_theorem1_identical_policies():
    p = random_tabular_pomdp((3, 2, 2), seed=0)
    pol = HistoryPolicy.random(2, 2, 4, np.random.default_rng(0))
    for kind in DIVERGENCES:
        chk = check_theorem1(p, pol, pol, kind, 4)
        assert chk.d_xa == pytest.approx(0, abs=1e-12) and chk.d_sa == pytest.approx(0, abs=1e-12)
        assert chk.d_za == pytest.approx(0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(DIVERGENCES))
def test_history_divergence_dominates_state_and_observation(seed, kind):
    rng = np.random.default_rng(seed)
    S, X = int(rng.integers(2, 6)), int(rng.integers(2, 4))
    p = random_tabular_pomdp((S, 2, X), seed)
    e, pi = HistoryPolicy.random(X, 2, 4, rng), HistoryPolicy.random(X, 2, 4, rng)
    chk = check_theorem1(p, e, pi, kind, 4)
    assume(chk.finite)
    assert chk.state_le_latent and chk.obs_le_latent


def test_observation_divergence_can_exceed_state_divergence():
    # one hidden state, two equally likely observations; mirrored reactive policies
    # induce identical (s, a) marginals but different (x, a) marginals
    p = TabularPOMDP(T=np.ones((1, 2, 1)), U=np.array([[0.5, 0.5]]), R=np.zeros((1, 2)), mu0=np.ones(1), gamma=0.9)
    e = HistoryPolicy.reactive(np.array([[0.9, 0.1], [0.1, 0.9]]), 2, 3)
    pi = HistoryPolicy.reactive(np.array([[0.1, 0.9], [0.9, 0.1]]), 2, 3)
    for kind in DIVERGENCES:
        chk = check_theorem1(p, e, pi, kind, 3)
        assert chk.d_sa == pytest.approx(0.0, abs=1e-12)
        assert chk.d_xa > 0.3
        assert not chk.obs_le_state and chk.state_le_latent


def test_campaign_reports_are_well_formed():
    for suite, trials in (("lemma1", 5), ("suboptimality", 5), ("discriminator", 5), ("theorem1", 2)):
        rep = CAMPAIGNS[suite](trials=trials, seed=0).to_dict()
        assert {"suite", "trials", "violations", "max_slack"} <= set(rep)
        assert rep["suite"] == suite and rep["trials"] == trials
