"""Bayesian reward for decision trees.

log R(T) = [log P(Y | X, T) - beta * n(T)] / temperature, with the leaf
class probabilities integrated out against a Dirichlet(alpha) prior.
Everything stays in log space (``gammaln``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.special import gammaln

from .data import Dataset
from .tree import LeafStats, TreeState, leaf_counts, num_decision_nodes


@dataclass(frozen=True)
class RewardParams:
    alpha: tuple[float, ...]
    beta: float
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if not all(a > 0 for a in self.alpha):
            raise ValueError("every alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def default(cls, num_classes: int, num_features: int, num_thresholds: int = 99, beta_rule: str = "table") -> "RewardParams":
        """alpha = 0.1 per class; beta from :func:`beta_default` or :func:`beta_heuristic`."""
        if beta_rule == "table":
            beta = beta_default(num_features)
        elif beta_rule == "coding":
            beta = beta_heuristic(num_features, num_thresholds)
        else:
            raise ValueError(f"unknown beta rule {beta_rule!r}")
        return cls((0.1,) * num_classes, beta)


def log_likelihood_given_theta(stats: LeafStats, theta) -> float:
    """sum_l sum_c n_lc log theta_lc; returns -inf when a zero probability meets data."""
    theta = np.asarray(theta, dtype=np.float64)
    counts = stats.counts
    if theta.shape != counts.shape:
        raise ValueError(f"theta shape {theta.shape} does not match counts {counts.shape}")
    hit = counts > 0
    if np.any(theta[hit] <= 0):
        return -math.inf
    return float(np.sum(counts[hit] * np.log(theta[hit])))


def log_marginal_likelihood(stats: LeafStats, alpha) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    counts = stats.counts
    num_leaves = counts.shape[0]
    a0 = alpha.sum()
    norm = gammaln(a0) - gammaln(alpha).sum()
    per_leaf = gammaln(counts + alpha).sum(axis=1) - gammaln(counts.sum(axis=1) + a0)
    return float(num_leaves * norm + per_leaf.sum())


def log_prior(tree: TreeState, beta: float) -> float:
    return -beta * num_decision_nodes(tree)


def log_reward_from_stats(tree: TreeState, stats: LeafStats, p: RewardParams) -> float:
    return (log_marginal_likelihood(stats, p.alpha) + log_prior(tree, p.beta)) / p.temperature


def log_reward(tree: TreeState, d: Dataset, p: RewardParams) -> float:
    if not tree.terminal:
        raise ValueError("reward is defined on terminal trees only")
    if len(p.alpha) != d.num_classes:
        raise ValueError("alpha must have one entry per class")
    return log_reward_from_stats(tree, leaf_counts(tree, d), p)


def beta_heuristic(d: int, t: int) -> float:
    """Coding-length prior strength: log 4 + log d + log t."""
    if d < 1 or t < 1:
        raise ValueError("d and t must be positive")
    return math.log(4) + math.log(d) + math.log(t)


def beta_default(d: int) -> float:
    """log 4 + log d, the value used for reproduction runs."""
    if d < 1:
        raise ValueError("d must be positive")
    return math.log(4) + math.log(d)


def count_trees_at_depth(p: int, depth: int) -> int:
    """Full-depth binary trees with ``p`` binary features and no reuse on a path.

    Level k holds n_k >= 1 decision nodes chosen among the 2 n_{k-1} child
    positions, each picking one of ``p - k`` unused features.
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if p < depth:
        raise ValueError(f"need p >= depth, got p={p}, depth={depth}")
    ways = {1: p}
    for k in range(1, depth):
        nxt: dict[int, int] = {}
        for n_prev, w in ways.items():
            for n_k in range(1, 2 * n_prev + 1):
                nxt[n_k] = nxt.get(n_k, 0) + w * comb(2 * n_prev, n_k) * (p - k) ** n_k
        ways = nxt
    return sum(ways.values())


def count_trees(p: int, d: int) -> int:
    """Search-space size summed over depths 1..d (exact integer)."""
    if p < d:
        raise ValueError(f"need p >= d, got p={p}, d={d}")
    return sum(count_trees_at_depth(p, k) for k in range(1, d + 1))


def scientific(n: int, digits: int = 3) -> str:
    """``56098964644840`` -> ``'5.609 x 10^13'``; the mantissa is truncated, not rounded."""
    if n <= 0:
        return str(n)
    text = str(n)
    mant = (text + "0" * digits)[: digits + 1]
    return f"{mant[0]}.{mant[1:]} x 10^{len(text) - 1}"
