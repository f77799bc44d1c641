"""Decision-tree states, transitions, masking and data routing.

A state is a fixed-capacity breadth-first array of ``2**(d_max+1) - 1``
slots; the children of slot ``i`` are ``2i+1`` (left, ``x[f] <= thr``) and
``2i+2`` (right).  Thresholds are the ``t`` interior grid points
``(i+1)/(t+1)`` of [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Union

import numpy as np

from .data import Dataset

# Above this many features, paths carry a scaled feature index instead of a one-hot block.
ONEHOT_MAX_FEATURES = 64


class TreeError(ValueError):
    pass


class TerminalStateError(TreeError):
    pass


class NotFrontierError(TreeError):
    pass


class DepthExceededError(TreeError):
    pass


class IllegalActionError(TreeError):
    pass


LEAF = "leaf"


def threshold_value(index: int, num_thresholds: int) -> float:
    return (index + 1) / (num_thresholds + 1)


def threshold_grid(num_thresholds: int) -> np.ndarray:
    return np.arange(1, num_thresholds + 1, dtype=np.float64) / (num_thresholds + 1)


def depth_of(slot: int) -> int:
    return (slot + 1).bit_length() - 1


def parent_of(slot: int) -> int:
    return (slot - 1) // 2


@dataclass(frozen=True)
class DecisionRule:
    feature: int
    threshold_index: int
    threshold_value: float

    @classmethod
    def make(cls, feature: int, threshold_index: int, num_thresholds: int) -> "DecisionRule":
        if not 0 <= threshold_index < num_thresholds:
            raise TreeError(f"threshold index {threshold_index} outside [0, {num_thresholds})")
        return cls(int(feature), int(threshold_index), threshold_value(threshold_index, num_thresholds))


@dataclass(frozen=True)
class Split:
    slot: int
    rule: DecisionRule


@dataclass(frozen=True)
class Terminate:
    pass


TERMINATE = Terminate()
Action = Union[Split, Terminate]


@dataclass(frozen=True)
class TreeState:
    d_max: int
    num_thresholds: int
    nodes: tuple
    terminal: bool = False

    @property
    def num_slots(self) -> int:
        return len(self.nodes)

    def is_decision(self, slot: int) -> bool:
        return slot < len(self.nodes) and isinstance(self.nodes[slot], DecisionRule)

    def frontier(self) -> tuple[int, ...]:
        """Slots that are (or will become) leaves of the current tree."""
        if self.terminal:
            return tuple(i for i, v in enumerate(self.nodes) if v == LEAF)
        out = []
        for i, v in enumerate(self.nodes):
            if v is None and (i == 0 or self.is_decision(parent_of(i))):
                out.append(i)
        return tuple(out)

    def decision_slots(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.nodes) if isinstance(v, DecisionRule))

    def key(self) -> tuple:
        """Canonical hashable identity: rule indices by breadth-first slot."""
        enc = []
        for v in self.nodes:
            if isinstance(v, DecisionRule):
                enc.append((v.feature, v.threshold_index))
            else:
                enc.append(v)
        return (self.d_max, self.num_thresholds, self.terminal, tuple(enc))


def empty_state(d_max: int, num_thresholds: int = 99) -> TreeState:
    if d_max < 1:
        raise TreeError("d_max must be at least 1")
    if num_thresholds < 1:
        raise TreeError("need at least one threshold")
    return TreeState(d_max, num_thresholds, (None,) * (2 ** (d_max + 1) - 1))


def apply_action(s: TreeState, a: Action) -> TreeState:
    if s.terminal:
        raise TerminalStateError("no actions are available from a terminal state")
    if isinstance(a, Terminate):
        nodes = list(s.nodes)
        for i in s.frontier():
            nodes[i] = LEAF
        return replace(s, nodes=tuple(nodes), terminal=True)
    if a.slot not in s.frontier():
        raise NotFrontierError(f"slot {a.slot} is not on the frontier")
    if depth_of(a.slot) >= s.d_max:
        raise DepthExceededError(f"slot {a.slot} is at the maximum depth {s.d_max}")
    if a.rule.threshold_index >= s.num_thresholds:
        raise TreeError("threshold index does not match the state's grid")
    nodes = list(s.nodes)
    nodes[a.slot] = a.rule
    return replace(s, nodes=tuple(nodes))


def unterminate(s: TreeState) -> TreeState:
    if not s.terminal:
        return s
    return replace(s, nodes=tuple(None if v == LEAF else v for v in s.nodes), terminal=False)


def removable_nodes(s: TreeState) -> tuple[int, ...]:
    """Decision slots whose two children are not decisions."""
    out = []
    for i in s.decision_slots():
        left, right = 2 * i + 1, 2 * i + 2
        if not s.is_decision(left) and not s.is_decision(right):
            out.append(i)
    return tuple(out)


def remove_node(s: TreeState, slot: int) -> TreeState:
    if s.terminal or slot not in removable_nodes(s):
        raise TreeError(f"slot {slot} cannot be removed")
    nodes = list(s.nodes)
    nodes[slot] = None
    return replace(s, nodes=tuple(nodes))


def parents(s: TreeState) -> list[TreeState]:
    if s.terminal:
        return [unterminate(s)]
    return [remove_node(s, k) for k in removable_nodes(s)]


def num_decision_nodes(s: TreeState) -> int:
    return sum(isinstance(v, DecisionRule) for v in s.nodes)


def num_nodes(s: TreeState) -> int:
    """Total node count: decision nodes plus leaves."""
    return num_decision_nodes(s) + len(s.frontier())


def route(tree: TreeState, x) -> int:
    slot = 0
    while tree.is_decision(slot):
        rule = tree.nodes[slot]
        slot = 2 * slot + 1 if x[rule.feature] <= rule.threshold_value else 2 * slot + 2
    return slot


def route_rows(tree: TreeState, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`route` over the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    slots = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(tree.d_max):
        moved = False
        for i in tree.decision_slots():
            sel = slots == i
            if not sel.any():
                continue
            rule = tree.nodes[i]
            go_left = X[sel, rule.feature] <= rule.threshold_value
            slots[sel] = np.where(go_left, 2 * i + 1, 2 * i + 2)
            moved = True
        if not moved:
            break
    return slots


@dataclass(frozen=True, eq=False)
class LeafStats:
    slots: tuple[int, ...]
    counts: np.ndarray  # (num_leaves, num_classes)

    def __add__(self, other: "LeafStats") -> "LeafStats":
        if self.slots != other.slots:
            raise TreeError("cannot add statistics of different trees")
        return LeafStats(self.slots, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _batches(data) -> Iterable[tuple[np.ndarray, np.ndarray, Optional[int]]]:
    if isinstance(data, Dataset):
        yield data.features, data.labels, data.num_classes
        return
    for b in data:
        if isinstance(b, Dataset):
            yield b.features, b.labels, b.num_classes
        else:
            X, y = b
            yield np.asarray(X), np.asarray(y), None


def leaf_counts(tree: TreeState, data, num_classes: Optional[int] = None) -> LeafStats:
    """Per-leaf class counts; ``data`` is a Dataset or an iterable of batches.

    Batches may be Datasets or ``(X, y)`` pairs; counts add up across them.
    """
    slots = tree.frontier()
    index = np.full(tree.num_slots, -1, dtype=np.int64)
    index[list(slots)] = np.arange(len(slots))
    counts = None
    for X, y, c in _batches(data):
        C = num_classes or c or (None if counts is None else counts.shape[1])
        if C is None:
            raise TreeError("num_classes is required for raw (X, y) batches")
        if counts is None:
            counts = np.zeros((len(slots), C), dtype=np.int64)
        leaf = index[route_rows(tree, X)]
        np.add.at(counts, (leaf, np.asarray(y, dtype=np.int64)), 1)
    if counts is None:
        if num_classes is None:
            raise TreeError("empty batch stream and no num_classes given")
        counts = np.zeros((len(slots), num_classes), dtype=np.int64)
    return LeafStats(slots, counts)


@dataclass(frozen=True, eq=False)
class LegalMask:
    frontier: tuple[int, ...]
    splits: dict  # slot -> bool array (num_features, num_thresholds)
    terminate: bool = True

    def any_split(self) -> bool:
        return any(m.any() for m in self.splits.values())

    def allows(self, a: Action) -> bool:
        if isinstance(a, Terminate):
            return self.terminate
        m = self.splits.get(a.slot)
        return m is not None and bool(m[a.rule.feature, a.rule.threshold_index])


def split_mask(X_rows: np.ndarray, grid: np.ndarray, slot: int, d_max: int, num_features: int) -> np.ndarray:
    """Valid (feature, threshold) pairs for the rows reaching ``slot``."""
    if X_rows.shape[0] == 0 or depth_of(slot) >= d_max:
        return np.zeros((num_features, grid.size), dtype=bool)
    lo = X_rows.min(axis=0)[:, None]
    hi = X_rows.max(axis=0)[:, None]
    return (grid[None, :] >= lo) & (grid[None, :] < hi)


def legal_action_mask(s: TreeState, d: Dataset) -> LegalMask:
    if s.terminal:
        raise TerminalStateError("terminal states have no legal actions")
    grid = threshold_grid(s.num_thresholds)
    slots = route_rows(s, d.features)
    splits = {
        i: split_mask(d.features[slots == i], grid, i, s.d_max, d.d) for i in s.frontier()
    }
    return LegalMask(s.frontier(), splits)


def block_size(num_features: int) -> int:
    return (num_features if num_features <= ONEHOT_MAX_FEATURES else 1) + 3


def path_vector(s: TreeState, slot: int, num_features: int) -> np.ndarray:
    """Root-to-``slot`` path encoding, ``d_max`` blocks, zero padded.

    Block k holds the k-th ancestor's feature (one-hot, or ``(f+1)/d`` for
    wide data), its threshold value, and two bits for left/right descent.
    """
    width = block_size(num_features)
    out = np.zeros(s.d_max * width, dtype=np.float64)
    chain = []
    node = slot
    while node > 0:
        p = parent_of(node)
        chain.append((p, node == 2 * p + 1))
        node = p
    for k, (p, went_left) in enumerate(reversed(chain)):
        rule = s.nodes[p]
        base = k * width
        if num_features <= ONEHOT_MAX_FEATURES:
            out[base + rule.feature] = 1.0
            off = base + num_features
        else:
            out[base] = (rule.feature + 1) / num_features
            off = base + 1
        out[off] = rule.threshold_value
        out[off + 1 + (0 if went_left else 1)] = 1.0
    return out


def leaf_path_encoding(s: TreeState, num_features: int) -> tuple[tuple[int, ...], np.ndarray]:
    slots = s.frontier()
    return slots, np.stack([path_vector(s, i, num_features) for i in slots])


def to_json(tree: TreeState) -> dict:
    nodes = []
    for i, v in enumerate(tree.nodes):
        if isinstance(v, DecisionRule):
            nodes.append({"index": i, "kind": "decision", "feature": v.feature, "threshold_index": v.threshold_index})
        elif v == LEAF:
            nodes.append({"index": i, "kind": "leaf"})
    return {
        "d_max": tree.d_max,
        "num_thresholds": tree.num_thresholds,
        "terminal": tree.terminal,
        "nodes": nodes,
    }


def from_json(obj: dict) -> TreeState:
    s = empty_state(int(obj["d_max"]), int(obj["num_thresholds"]))
    nodes = list(s.nodes)
    for node in obj["nodes"]:
        i = int(node["index"])
        if node["kind"] == "decision":
            nodes[i] = DecisionRule.make(node["feature"], node["threshold_index"], s.num_thresholds)
        elif node["kind"] == "leaf":
            nodes[i] = LEAF
        else:
            raise TreeError(f"unknown node kind {node['kind']!r}")
    return replace(s, nodes=tuple(nodes), terminal=bool(obj.get("terminal", True)))


def render(tree: TreeState, feature_names: Optional[tuple[str, ...]] = None) -> str:
    """Indented text view, mostly for logs."""
    lines = []

    def walk(i: int, indent: int) -> None:
        v = tree.nodes[i]
        pad = "  " * indent
        if isinstance(v, DecisionRule):
            name = feature_names[v.feature] if feature_names else f"x[{v.feature}]"
            lines.append(f"{pad}{name} <= {v.threshold_value:.4g}")
            walk(2 * i + 1, indent + 1)
            walk(2 * i + 2, indent + 1)
        else:
            lines.append(f"{pad}leaf#{i}")

    walk(0, 0)
    return "\n".join(lines)
