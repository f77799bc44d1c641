import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from dtgfn.reward import (
    RewardParams,
    beta_default,
    beta_heuristic,
    count_trees,
    count_trees_at_depth,
    log_likelihood_given_theta,
    log_marginal_likelihood,
    log_prior,
    log_reward,
    scientific,
)
from dtgfn.tree import TERMINATE, DecisionRule, LeafStats, Split, apply_action, empty_state, leaf_counts
from oracles import count_trees_recursive, mc_marginal_likelihood


def stats(*rows):
    counts = np.array(rows, dtype=np.int64)
    return LeafStats(tuple(range(len(rows))), counts)


def test_likelihood_given_theta():
    assert log_likelihood_given_theta(stats([1, 0]), [[0.5, 0.5]]) == pytest.approx(math.log(0.5))
    assert log_likelihood_given_theta(stats([3, 0], [0, 2]), [[1, 0], [0, 1]]) == 0.0
    assert log_likelihood_given_theta(stats([2, 1]), [[2 / 3, 1 / 3]]) == pytest.approx(2 * math.log(2 / 3) + math.log(1 / 3))
    assert log_likelihood_given_theta(stats([0, 1]), [[1.0, 0.0]]) == -math.inf


def test_marginal_examples():
    assert log_marginal_likelihood(stats([0, 0], [0, 0]), [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)
    assert log_marginal_likelihood(stats([1, 0]), [1, 1]) == pytest.approx(math.log(1 / 2))
    assert log_marginal_likelihood(stats([2, 1]), [1, 1]) == pytest.approx(math.log(1 / 12))


def test_marginal_large_counts_finite():
    v = log_marginal_likelihood(stats([10**6, 3, 5]), [0.1, 0.1, 0.1])
    assert math.isfinite(v) and v < 0


def test_marginal_matches_monte_carlo():
    rng = np.random.default_rng(7)
    for _ in range(10):
        L, C = rng.integers(1, 3), rng.integers(2, 4)
        counts = rng.integers(0, 4, size=(L, C))
        alpha = rng.uniform(0.5, 2.0, size=C)
        est, se = mc_marginal_likelihood(counts, alpha, 20_000, rng)
        exact = math.exp(log_marginal_likelihood(LeafStats(tuple(range(L)), counts), alpha))
        assert abs(est - exact) <= 4 * se


@settings(max_examples=50)
@given(st.lists(st.lists(st.integers(0, 20), min_size=3, max_size=3), min_size=1, max_size=6), st.randoms())
def test_marginal_leaf_order_invariance(rows, rnd):
    alpha = [0.1, 0.5, 2.0]
    perm = rows[:]
    rnd.shuffle(perm)
    assert log_marginal_likelihood(stats(*rows), alpha) == pytest.approx(log_marginal_likelihood(stats(*perm), alpha), abs=1e-9)


def test_log_prior():
    s = empty_state(2)
    assert log_prior(s, 3.0) == 0.0
    r = DecisionRule.make(0, 0, 1)
    for slot in (0, 1, 2):
        s = apply_action(s, Split(slot, r if slot == 0 else DecisionRule.make(1, 0, 1)))
    assert log_prior(s, math.log(4)) == pytest.approx(-3 * math.log(4))
    assert log_prior(s, 0.0) == 0.0


def test_log_reward(iris):
    stump = apply_action(empty_state(3), TERMINATE)
    p0 = RewardParams((0.1,) * 3, 0.0)
    assert log_reward(stump, iris, p0) == pytest.approx(log_marginal_likelihood(stats([50, 50, 50]), p0.alpha))
    s = apply_action(apply_action(empty_state(3, 99), Split(0, DecisionRule.make(2, 30, 99))), TERMINATE)
    p1 = RewardParams.default(3, 4)
    p2 = RewardParams(p1.alpha, p1.beta, 2.0)
    assert log_reward(s, iris, p2) == pytest.approx(log_reward(s, iris, p1) / 2)
    with pytest.raises(ValueError):
        log_reward(empty_state(3), iris, p1)


def test_log_reward_hand_value():
    # two leaves: (2, 0) and (0, 1); alpha (1, 1); beta 0.5
    d = make_dataset([[0.1], [0.2], [0.9]], [0, 0, 1])
    s = apply_action(apply_action(empty_state(1, 1), Split(0, DecisionRule.make(0, 0, 1))), TERMINATE)
    lg = math.lgamma
    leaf = lambda a, b: lg(2) - 2 * lg(1) + lg(a + 1) + lg(b + 1) - lg(a + b + 2)
    expected = leaf(2, 0) + leaf(0, 1) - 0.5
    assert log_reward(s, d, RewardParams((1, 1), 0.5)) == pytest.approx(expected, abs=1e-12)


def test_data_order_invariance(iris):
    s = apply_action(apply_action(empty_state(3, 99), Split(0, DecisionRule.make(3, 40, 99))), TERMINATE)
    p = RewardParams.default(3, 4)
    perm = np.random.default_rng(0).permutation(iris.n)
    assert log_reward(s, iris, p) == log_reward(s, iris.subset(perm), p)
    streamed = leaf_counts(s, [iris.subset(np.arange(0, 60)), iris.subset(np.arange(60, 150))])
    assert np.array_equal(streamed.counts, leaf_counts(s, iris).counts)


def test_params_validation():
    with pytest.raises(ValueError):
        RewardParams((0.1, 0.0), 1.0)
    with pytest.raises(ValueError):
        RewardParams((0.1, 0.1), -1.0)
    with pytest.raises(ValueError):
        RewardParams((0.1, 0.1), 1.0, 0.0)
    p = RewardParams.default(3, 4)
    assert p.alpha == (0.1, 0.1, 0.1) and p.beta == pytest.approx(math.log(16))
    assert RewardParams.default(3, 4, 99, "coding").beta == pytest.approx(math.log(16 * 99))


def test_beta():
    assert beta_heuristic(1, 1) == pytest.approx(math.log(4))
    assert beta_heuristic(10, 99) == pytest.approx(math.log(3960))
    assert beta_default(4) == pytest.approx(math.log(16))
    grid = [[beta_heuristic(d, t) for t in range(1, 6)] for d in range(1, 6)]
    assert np.all(np.diff(grid, axis=0) >= 0) and np.all(np.diff(grid, axis=1) >= 0)


TABLE_1 = {
    (10, 1): "1.000 x 10^1",
    (10, 2): "1.000 x 10^3",
    (10, 3): "5.329 x 10^6",
    (10, 4): "5.609 x 10^13",
    (20, 1): "2.000 x 10^1",
    (20, 2): "8.000 x 10^3",
    (20, 3): "9.411 x 10^8",
    (20, 4): "8.358 x 10^18",
}


@pytest.mark.parametrize("pd, text", sorted(TABLE_1.items()))
def test_count_trees_table(pd, text):
    assert scientific(count_trees(*pd)) == text


@pytest.mark.parametrize("p", range(1, 9))
def test_count_trees_against_recursion(p):
    for d in range(1, p + 1):
        assert count_trees(p, d) == count_trees_recursive(p, d)


def test_count_trees_small_values():
    assert count_trees(10, 1) == 10
    assert count_trees(10, 2) == 1000
    assert count_trees(20, 2) == 8000
    assert count_trees_at_depth(2, 2) == 2 * (2 + 1)  # root, then one child, the other, or both
    with pytest.raises(ValueError):
        count_trees(3, 4)


def test_scientific_truncates():
    assert scientific(56098964644840) == "5.609 x 10^13"
    assert scientific(19999) == "1.999 x 10^4"
    assert scientific(7) == "7.000 x 10^0"


def test_gammaln_form_matches_gamma_ratio():
    # small counts, where Gamma itself is safe, against the raw ratio form
    counts, alpha = np.array([3, 1, 2]), np.array([0.5, 1.0, 1.5])
    direct = math.gamma(alpha.sum()) / np.prod([math.gamma(a) for a in alpha])
    direct *= np.prod([math.gamma(n + a) for n, a in zip(counts, alpha)]) / math.gamma(counts.sum() + alpha.sum())
    assert log_marginal_likelihood(stats(counts.tolist()), alpha) == pytest.approx(math.log(direct), rel=1e-12)
