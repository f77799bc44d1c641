"""Exhaustive enumeration of the reachable tree space for small instances.

The exact posterior over enumerated trees is the ground truth the trained
sampler is compared against.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .env import Builder, Trace, TreeEnv
from .policy import PolicyModel, sample_batch
from .reward import RewardParams, log_reward_from_stats
from .tree import TERMINATE, Split, TreeState, leaf_counts, to_json

DEFAULT_CAP = 10**6


class CapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"enumeration exceeded the cap of {cap} (reached {count} trees)")
        self.count = count
        self.cap = cap


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    trees: tuple[TreeState, ...]
    log_rewards: np.ndarray
    log_partition: float
    probabilities: np.ndarray

    def index(self) -> dict:
        return {t.key(): i for i, t in enumerate(self.trees)}

    def top_k(self, k: int = 5) -> list[tuple[TreeState, float]]:
        order = np.argsort(-self.probabilities, kind="stable")[:k]
        return [(self.trees[i], float(self.probabilities[i])) for i in order]


def _clone(b: Builder) -> Builder:
    c = Builder.__new__(Builder)
    c.env, c.state = b.env, b.state
    c.rows, c.masks, c.leaf_id = dict(b.rows), dict(b.masks), dict(b.leaf_id)
    c.trace = Trace()  # enumeration never reads traces
    return c


def _enumerate(env: TreeEnv, cap: int) -> list[tuple[TreeState, Builder]]:
    out: list[tuple[TreeState, Builder]] = []
    seen: set = set()
    stack = [env.builder()]
    while stack:
        b = stack.pop()
        k = b.state.key()
        if k in seen:
            continue
        seen.add(k)
        t = _clone(b)
        t.step(TERMINATE)
        out.append((t.state, t))
        if len(out) > cap:
            raise CapExceeded(len(out), cap)
        for slot in reversed(b.frontier):
            m = b.masks[slot].reshape(-1)
            for flat in reversed(np.flatnonzero(m)):
                c = _clone(b)
                c.step(Split(slot, env.rule_from_flat(int(flat))))
                if c.state.key() not in seen:
                    stack.append(c)
    return out


def enumerate_trees(d: Dataset, d_max: int, t: int, cap: int = DEFAULT_CAP) -> list[TreeState]:
    """Every reachable terminal tree exactly once, stump first."""
    return [s for s, _ in _enumerate(TreeEnv(d, d_max, t), cap)]


def exact_posterior(trees: Sequence[TreeState], d: Dataset, p: RewardParams) -> ExactPosterior:
    if not trees:
        raise ValueError("need at least one tree")
    log_r = np.array([log_reward_from_stats(t, leaf_counts(t, d), p) for t in trees])
    return posterior_from_log_rewards(trees, log_r)


def posterior_from_log_rewards(trees: Sequence[TreeState], log_r) -> ExactPosterior:
    log_r = np.asarray(log_r, dtype=np.float64)
    z = float(logsumexp(log_r))
    return ExactPosterior(tuple(trees), log_r, z, np.exp(log_r - z))


def total_variation(counts: Counter, exact: ExactPosterior) -> float:
    """0.5 * sum |empirical - exact|; raises if a counted tree is outside the support."""
    idx = exact.index()
    emp = np.zeros(len(exact.trees))
    n = sum(counts.values())
    for k, c in counts.items():
        if k not in idx:
            raise ValueError(f"sampled tree outside the enumerated support: {k}")
        emp[idx[k]] += c / n
    return 0.5 * float(np.abs(emp - exact.probabilities).sum())


def sampler_divergence(
    model: PolicyModel,
    d: Dataset,
    exact: ExactPosterior,
    num_samples: int,
    rng: np.random.Generator,
    chunk: int = 1000,
) -> tuple[float, float]:
    """(TV distance of on-policy samples to ``exact``, |log_z - log partition|)."""
    env = TreeEnv(d, model.cfg.d_max, model.cfg.num_thresholds)
    counts: Counter = Counter()
    left = num_samples
    while left > 0:
        n = min(chunk, left)
        for tr in sample_batch(model, env, n, 0.0, rng):
            counts[tr.tree.key()] += 1
        left -= n
    tv = total_variation(counts, exact)
    gap = abs(float(model.log_z.detach()) - exact.log_partition)
    return tv, gap


def report(exact: ExactPosterior, tv: Optional[float] = None, gap: Optional[float] = None, k: int = 5) -> dict:
    return {
        "num_trees": len(exact.trees),
        "log_partition": exact.log_partition,
        "tv_distance": tv,
        "log_z_gap": gap,
        "top_k": [{"tree": to_json(t), "probability": p} for t, p in exact.top_k(k)],
    }
