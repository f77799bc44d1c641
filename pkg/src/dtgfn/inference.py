"""Posterior sampling, Bayesian model averaging, evaluation and the OOD rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .env import TreeEnv
from .policy import PolicyModel, sample_batch
from .reward import RewardParams, log_reward_from_stats
from .tree import TreeState, from_json, leaf_counts, num_decision_nodes, num_nodes, route_rows, to_json


def sample_trees(
    model: PolicyModel,
    d: Dataset,
    m: int,
    rng: np.random.Generator,
    chunk: int = 500,
) -> list[TreeState]:
    """``m`` on-policy samples (duplicates kept)."""
    if m < 0:
        raise ValueError("m must be non-negative")
    env = TreeEnv(d, model.cfg.d_max, model.cfg.num_thresholds)
    out: list[TreeState] = []
    while len(out) < m:
        out.extend(t.tree for t in sample_batch(model, env, min(chunk, m - len(out)), 0.0, rng))
    return out


def leaf_posterior_params(
    tree: TreeState,
    d: Dataset,
    alpha,
    mode: str = "mean",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Per-leaf class probabilities, rows aligned with ``tree.frontier()``."""
    if not tree.terminal:
        raise ValueError("tree must be terminal")
    alpha = np.asarray(alpha, dtype=np.float64)
    post = leaf_counts(tree, d).counts + alpha
    if mode == "mean":
        return post / post.sum(axis=1, keepdims=True)
    if mode == "sample":
        if rng is None:
            raise ValueError("mode='sample' needs an rng")
        draws = np.stack([rng.dirichlet(row) for row in post])
        # Dirichlet draws with tiny alpha can underflow to exact zeros
        draws = np.maximum(draws, np.finfo(np.float64).tiny)
        return draws / draws.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown mode {mode!r}")


def normalized_weights(log_posteriors) -> np.ndarray:
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("no log-posteriors")
    m = lp.max()
    return np.exp(lp - m - logsumexp(lp - m))


@dataclass(frozen=True, eq=False)
class Ensemble:
    trees: tuple[TreeState, ...]
    log_posteriors: np.ndarray
    leaf_params: tuple[np.ndarray, ...]
    alpha: tuple[float, ...]
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("empty ensemble")
        if not (len(self.trees) == len(self.log_posteriors) == len(self.leaf_params)):
            raise ValueError("members, log-posteriors and leaf parameters must align")
        if not all(t.terminal for t in self.trees):
            raise ValueError("every member must be terminal")
        object.__setattr__(self, "log_posteriors", np.asarray(self.log_posteriors, dtype=np.float64))
        object.__setattr__(self, "weights", normalized_weights(self.log_posteriors))

    @classmethod
    def build(
        cls,
        trees: Sequence[TreeState],
        d: Dataset,
        p: RewardParams,
        mode: str = "mean",
        rng: Optional[np.random.Generator] = None,
    ) -> "Ensemble":
        # the posterior weight is the reward at temperature 1
        p1 = RewardParams(p.alpha, p.beta, 1.0)
        log_post, params = [], []
        cache: dict = {}
        for t in trees:
            k = t.key()
            if k not in cache:
                cache[k] = log_reward_from_stats(t, leaf_counts(t, d), p1)
            log_post.append(cache[k])
            params.append(leaf_posterior_params(t, d, p.alpha, mode, rng))
        return cls(tuple(trees), np.array(log_post), tuple(params), p.alpha)

    def __len__(self) -> int:
        return len(self.trees)

    def member_proba(self, i: int, X: np.ndarray) -> np.ndarray:
        tree = self.trees[i]
        index = np.full(tree.num_slots, -1, dtype=np.int64)
        index[list(tree.frontier())] = np.arange(len(tree.frontier()))
        return self.leaf_params[i][index[route_rows(tree, X)]]

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros((X.shape[0], len(self.alpha)))
        for i, w in enumerate(self.weights):
            if w > 0:
                out += w * self.member_proba(i, X)
        return out

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def to_json(self) -> list:
        return [
            {"tree": to_json(t), "log_posterior": float(lp), "alpha": list(self.alpha), "leaf_params": lp_.tolist()}
            for t, lp, lp_ in zip(self.trees, self.log_posteriors, self.leaf_params)
        ]

    @classmethod
    def from_json(cls, obj: list) -> "Ensemble":
        if not obj:
            raise ValueError("empty ensemble")
        return cls(
            tuple(from_json(e["tree"]) for e in obj),
            np.array([e["log_posterior"] for e in obj]),
            tuple(np.asarray(e["leaf_params"], dtype=np.float64) for e in obj),
            tuple(obj[0]["alpha"]),
        )


def bma_predict(e: Ensemble, x) -> tuple[int, np.ndarray]:
    probs = e.predict_proba(np.asarray(x, dtype=np.float64)[None, :])[0]
    return int(probs.argmax()), probs


def ood_scores(e: Ensemble, X, normal_classes: Sequence[int] = (0,)) -> np.ndarray:
    """BMA probability mass on the normal class(es), per row."""
    probs = e.predict_proba(X)
    return np.clip(probs[:, list(normal_classes)].sum(axis=1), 0.0, 1.0)


def ood_classify(scores) -> np.ndarray:
    """True marks an anomaly: score below mean - 2 std (population std)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two scores")
    return s < s.mean() - 2.0 * s.std()


def f1_binary(y_true, y_pred, positive: int = 1) -> float:
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    tp = int(np.sum(t & p))
    denom = int(t.sum() + p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def f1_macro(y_true, y_pred, num_classes: int) -> float:
    return float(np.mean([f1_binary(y_true, y_pred, c) for c in range(num_classes)]))


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    model_size: float
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "model_size": self.model_size, "per_seed": self.per_seed}

    @classmethod
    def aggregate(cls, reports: Sequence["EvalReport"], seeds: Sequence[int]) -> "EvalReport":
        return cls(
            float(np.mean([r.accuracy for r in reports])),
            float(np.mean([r.f1 for r in reports])),
            float(np.mean([r.model_size for r in reports])),
            [{"seed": s, **{k: v for k, v in r.to_dict().items() if k != "per_seed"}} for s, r in zip(seeds, reports)],
        )


def evaluate(model: Union[Ensemble, TreeState], test: Dataset, train: Optional[Dataset] = None, p: Optional[RewardParams] = None) -> EvalReport:
    """Accuracy, F1 (binary for 2 classes, macro otherwise) and mean total node count.

    A bare tree is wrapped in a one-member ensemble fitted on ``train``.
    """
    if test.n == 0:
        raise ValueError("empty test set")
    if isinstance(model, TreeState):
        if train is None:
            raise ValueError("a single tree needs the training set for its leaf parameters")
        p = p or RewardParams.default(train.num_classes, train.d)
        model = Ensemble.build([model], train, p)
    pred = model.predict(test.features)
    acc = float(np.mean(pred == test.labels))
    C = max(test.num_classes, len(model.alpha))
    f1 = f1_binary(test.labels, pred) if C == 2 else f1_macro(test.labels, pred, C)
    size = float(np.mean([num_nodes(t) for t in model.trees]))
    return EvalReport(acc, f1, size)


def select_map_tree(samples: Sequence[TreeState], d: Dataset, p: RewardParams) -> TreeState:
    """Highest log-reward at temperature 1; ties go to fewer decision nodes, then the smaller key."""
    if not samples:
        raise ValueError("no samples")
    p1 = RewardParams(p.alpha, p.beta, 1.0)
    best, best_key = None, None
    seen: set = set()
    for t in samples:
        k = t.key()
        if k in seen:
            continue
        seen.add(k)
        score = (-log_reward_from_stats(t, leaf_counts(t, d), p1), num_decision_nodes(t), repr(k))
        if best_key is None or score < best_key:
            best, best_key = t, score
    return best
