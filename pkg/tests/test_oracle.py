from collections import Counter

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import binary_patterns, make_dataset
from dtgfn.env import TreeEnv
from dtgfn.oracle import (
    CapExceeded,
    enumerate_trees,
    exact_posterior,
    posterior_from_log_rewards,
    report,
    sampler_divergence,
    total_variation,
)
from dtgfn.policy import PolicyConfig, PolicyModel
from dtgfn.reward import RewardParams, log_reward
from dtgfn.tree import TERMINATE, Split
from oracles import count_trees_recursive


def random_rollout(env, rng):
    b = env.builder()
    while not b.state.terminal:
        options = [TERMINATE] + [Split(s, env.rule_from_flat(int(f))) for s in b.frontier for f in np.flatnonzero(b.masks[s].reshape(-1))]
        b.step(options[int(rng.integers(len(options)))])
    return b.state


def test_constant_features_single_tree():
    d = make_dataset([[0.5, 0.5]] * 4, [0, 1, 0, 1])
    trees = enumerate_trees(d, 3, 5)
    assert len(trees) == 1 and trees[0].terminal


def test_one_binary_feature():
    d = make_dataset([[0.0], [1.0]], [0, 1])
    assert len(enumerate_trees(d, 1, 1)) == 2


def test_count_matches_recursion_on_full_design():
    # all 8 patterns of 3 binary features: every path-unique tree is reachable
    d = make_dataset(binary_patterns(3), [0, 1] * 4)
    trees = enumerate_trees(d, 2, 1)
    assert len(trees) == 28 == count_trees_recursive(3, 2) + 1
    assert len({t.key() for t in trees}) == len(trees)
    assert not trees[0].decision_slots()


def test_row_order_independent():
    X = binary_patterns(3)
    d = make_dataset(X, [0, 1, 1, 0, 1, 0, 0, 1])
    perm = np.random.default_rng(3).permutation(8)
    a = {t.key() for t in enumerate_trees(d, 2, 1)}
    b = {t.key() for t in enumerate_trees(d.subset(perm), 2, 1)}
    assert a == b


def test_cap():
    d = make_dataset(binary_patterns(3), [0, 1] * 4)
    with pytest.raises(CapExceeded) as err:
        enumerate_trees(d, 2, 1, cap=1)
    assert err.value.cap == 1 and err.value.count == 2


def test_enumeration_covers_random_rollouts():
    rng = np.random.default_rng(0)
    X = rng.choice([0.0, 0.3, 0.6, 1.0], size=(10, 3))
    d = make_dataset(X, rng.integers(0, 2, 10))
    env = TreeEnv(d, 3, 3)
    support = {t.key() for t in enumerate_trees(d, 3, 3)}
    for _ in range(10_000):
        assert random_rollout(env, rng).key() in support


def test_partition_equals_direct_sum(tiny_binary):
    p = RewardParams.default(2, 3, 1)
    trees = enumerate_trees(tiny_binary, 2, 1)
    exact = exact_posterior(trees, tiny_binary, p)
    direct = float(logsumexp([log_reward(t, tiny_binary, p) for t in trees]))
    assert abs(exact.log_partition - direct) <= 1e-10
    assert exact.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    top = exact.top_k(2)
    assert top[0][1] >= top[1][1]
    rep = report(exact, 0.1, 0.2, k=3)
    assert rep["num_trees"] == 28 and len(rep["top_k"]) == 3


def test_total_variation_on_exact_draws():
    d = make_dataset([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]], [0, 1, 1])
    trees = enumerate_trees(d, 1, 1)
    assert len(trees) == 3
    exact = posterior_from_log_rewards(trees, [0.0, np.log(2.0), np.log(5.0)])
    rng = np.random.default_rng(0)
    draws = rng.choice(len(trees), size=100_000, p=exact.probabilities)
    counts = Counter(trees[i].key() for i in draws)
    assert total_variation(counts, exact) <= 0.02
    # a point mass on the least likely tree is far from the target
    assert total_variation(Counter({trees[0].key(): 10}), exact) == pytest.approx(1 - exact.probabilities[0])


def test_total_variation_rejects_unknown_tree():
    d = make_dataset([[0.0], [1.0]], [0, 1])
    exact = exact_posterior(enumerate_trees(d, 1, 1), d, RewardParams.default(2, 1, 1))
    with pytest.raises(ValueError):
        total_variation(Counter({("bogus",): 1}), exact)


def test_untrained_sampler_is_off_target(tiny_binary):
    p = RewardParams.default(2, 3, 1)
    exact = exact_posterior(enumerate_trees(tiny_binary, 2, 1), tiny_binary, p)
    m = PolicyModel(PolicyConfig(3, 1, 2, (16,), 16, 0))
    tv, gap = sampler_divergence(m, tiny_binary, exact, 2000, np.random.default_rng(0))
    assert tv > 0.1
    assert gap == pytest.approx(abs(exact.log_partition))
