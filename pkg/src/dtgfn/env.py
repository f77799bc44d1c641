"""Incremental tree construction bound to one dataset.

:class:`TreeEnv` keeps the rows reaching every frontier slot so that masks,
path encodings and leaf counts are computed once per new leaf instead of by
re-routing the whole dataset at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .reward import RewardParams, log_reward_from_stats
from .tree import (
    TERMINATE,
    Action,
    DecisionRule,
    IllegalActionError,
    LeafStats,
    Split,
    Terminate,
    TreeState,
    apply_action,
    empty_state,
    path_vector,
    split_mask,
    threshold_grid,
)


class TreeEnv:
    def __init__(self, dataset: Dataset, d_max: int, num_thresholds: int):
        self.dataset = dataset
        self.X = dataset.features
        self.y = dataset.labels
        self.num_classes = dataset.num_classes
        self.num_features = dataset.d
        self.d_max = d_max
        self.num_thresholds = num_thresholds
        self.grid = threshold_grid(num_thresholds)
        self._root_rows = np.arange(dataset.n)
        self._root_mask = split_mask(self.X, self.grid, 0, d_max, self.num_features)

    @property
    def num_rules(self) -> int:
        return self.num_features * self.num_thresholds

    def empty(self) -> TreeState:
        return empty_state(self.d_max, self.num_thresholds)

    def builder(self) -> "Builder":
        return Builder(self)

    def rule(self, feature: int, threshold_index: int) -> DecisionRule:
        return DecisionRule.make(feature, threshold_index, self.num_thresholds)

    def rule_from_flat(self, flat: int) -> DecisionRule:
        return self.rule(flat // self.num_thresholds, flat % self.num_thresholds)


@dataclass
class Trace:
    """Per-leaf inputs and per-step choices of one trajectory, for batched scoring.

    ``steps`` holds ``(frontier leaf ids, chosen leaf id or -1, flat rule index)``;
    a leaf id of -1 marks Terminate.
    """

    enc: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    steps: list = field(default_factory=list)


class Builder:
    """Mutable construction cursor; ``state`` is always an immutable TreeState."""

    def __init__(self, env: TreeEnv):
        self.env = env
        self.state = env.empty()
        self.rows = {0: env._root_rows}
        self.masks = {0: env._root_mask}
        self.leaf_id = {}
        self.trace = Trace()
        self._register(0)

    def _register(self, slot: int) -> None:
        self.leaf_id[slot] = len(self.trace.enc)
        self.trace.enc.append(path_vector(self.state, slot, self.env.num_features))
        self.trace.masks.append(self.masks[slot].reshape(-1))

    @property
    def frontier(self) -> tuple[int, ...]:
        return self.state.frontier()

    def legal(self, a: Action) -> bool:
        if isinstance(a, Terminate):
            return not self.state.terminal
        m = self.masks.get(a.slot)
        return m is not None and bool(m[a.rule.feature, a.rule.threshold_index])

    def valid_counts(self) -> list[int]:
        return [int(self.masks[s].sum()) for s in self.frontier]

    def step(self, a: Action) -> None:
        if self.state.terminal:
            raise IllegalActionError("trajectory already terminated")
        if not self.legal(a):
            raise IllegalActionError(f"action {a} is masked in the current state")
        front = [self.leaf_id[s] for s in self.frontier]
        if isinstance(a, Terminate):
            self.trace.steps.append((front, -1, 0))
            self.state = apply_action(self.state, a)
            return
        flat = a.rule.feature * self.env.num_thresholds + a.rule.threshold_index
        self.trace.steps.append((front, self.leaf_id[a.slot], flat))
        self.state = apply_action(self.state, a)
        rows = self.rows.pop(a.slot)
        self.masks.pop(a.slot)
        go_left = self.env.X[rows, a.rule.feature] <= a.rule.threshold_value
        for child, sub in ((2 * a.slot + 1, rows[go_left]), (2 * a.slot + 2, rows[~go_left])):
            self.rows[child] = sub
            self.masks[child] = split_mask(
                self.env.X[sub], self.env.grid, child, self.env.d_max, self.env.num_features
            )
            self._register(child)

    def leaf_stats(self) -> LeafStats:
        slots = self.state.frontier()
        C = self.env.num_classes
        counts = np.stack([np.bincount(self.env.y[self.rows[s]], minlength=C) for s in slots])
        return LeafStats(slots, counts)

    def log_reward(self, p: RewardParams) -> float:
        return log_reward_from_stats(self.state, self.leaf_stats(), p)


def replay(env: TreeEnv, actions) -> Builder:
    """Re-run ``actions`` from the empty state, checking legality at every step."""
    b = env.builder()
    for a in actions:
        b.step(a)
    return b


def actions_for(tree: TreeState, order=None) -> list[Action]:
    """A forward action sequence building ``tree`` (breadth-first by default)."""
    slots = order if order is not None else tree.decision_slots()
    return [Split(s, tree.nodes[s]) for s in slots] + [TERMINATE]
