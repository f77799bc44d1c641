"""Trajectory-balance training with a top-K replay buffer."""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from .data import Dataset
from .env import TreeEnv
from .policy import (
    PolicyModel,
    Trajectory,
    backward_actions,
    batch_log_pf,
    log_pb,
    sample_batch,
    trajectory_from_actions,
)
from .reward import RewardParams, log_reward_from_stats
from .tree import TreeState, leaf_counts

METRIC_FIELDS = ("step", "mean_loss", "log_z", "epsilon", "buffer_min", "buffer_max")


class ReplayBuffer:
    """Top-K terminal trees by log-reward, deduplicated by canonical key."""

    def __init__(self, capacity: int = 100):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._keys: set = set()
        self._entries: list[tuple[float, str, TreeState]] = []  # ascending log-reward

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, tree: TreeState) -> bool:
        return tree.key() in self._keys

    def entries(self) -> list[tuple[TreeState, float]]:
        """(tree, log_reward), best first."""
        return [(t, r) for r, _, t in reversed(self._entries)]

    def min(self) -> float:
        return self._entries[0][0] if self._entries else math.nan

    def max(self) -> float:
        return self._entries[-1][0] if self._entries else math.nan

    def insert(self, tree: TreeState, log_reward: float) -> bool:
        if not tree.terminal:
            raise ValueError("only terminal trees go into the buffer")
        k = tree.key()
        if k in self._keys or self.capacity == 0:
            return False
        # ties are ordered by the key's repr so that eviction is deterministic
        entry = (float(log_reward), repr(k), tree)
        if len(self._entries) >= self.capacity and entry[:2] <= self._entries[0][:2]:
            return False
        bisect.insort(self._entries, entry, key=lambda e: e[:2])
        self._keys.add(k)
        if len(self._entries) > self.capacity:
            _, _, old = self._entries.pop(0)
            self._keys.discard(old.key())
        return True


def replay_insert(buf: ReplayBuffer, tree: TreeState, log_reward: float) -> None:
    buf.insert(tree, log_reward)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    lr: float = 0.01
    lr_log_z: float = 1.0
    batch_forward: int = 90
    batch_replay: int = 10
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    buffer_capacity: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_forward < 0 or self.batch_replay < 0 or self.batch_forward + self.batch_replay < 1:
            raise ValueError("need at least one trajectory per batch")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.lr < 0 or self.lr_log_z < 0:
            raise ValueError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out


def tb_loss(log_z, log_pf, log_pb, log_reward):
    """(log_z + log_pf - log_pb - log_reward)**2, elementwise; works on floats or tensors."""
    parts = (log_z, log_pf, log_pb, log_reward)
    for v in parts:
        finite = torch.isfinite(v).all() if isinstance(v, torch.Tensor) else np.all(np.isfinite(v))
        if not finite:
            raise ValueError("trajectory-balance inputs must be finite")
    resid = log_z + log_pf - log_pb - log_reward
    return resid * resid


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= max(cfg.steps, 0):
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.steps <= 1:
        return cfg.epsilon_start if step == 0 else cfg.epsilon_end
    frac = step / (cfg.steps - 1)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


@dataclass
class StepMetrics:
    step: int
    mean_loss: float
    log_z: float
    epsilon: float
    buffer_min: float
    buffer_max: float
    num_trajectories: int

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


class Trainer:
    """Owns the optimizer, buffer, reward cache and RNG for one training run."""

    def __init__(self, model: PolicyModel, d: Dataset, p: RewardParams, cfg: TrainConfig):
        if d.n == 0:
            raise ValueError("empty dataset")
        if len(p.alpha) != d.num_classes:
            raise ValueError("alpha must have one entry per class")
        self.model, self.data, self.params, self.cfg = model, d, p, cfg
        self.env = TreeEnv(d, model.cfg.d_max, model.cfg.num_thresholds)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(
            [
                {"params": model.policy_parameters(), "lr": cfg.lr},
                {"params": [model.log_z], "lr": cfg.lr_log_z},
            ],
            betas=cfg.adam_betas,
            eps=cfg.adam_eps,
        )
        self._reward_cache: dict = {}
        self.history: list[StepMetrics] = []

    def log_reward(self, traj: Trajectory) -> float:
        tree = traj.tree
        k = tree.key()
        r = self._reward_cache.get(k)
        if r is None:
            stats = traj.builder.leaf_stats() if traj.builder is not None else leaf_counts(tree, self.data)
            r = self._reward_cache[k] = log_reward_from_stats(tree, stats, self.params)
        return r

    def replay_trajectories(self, n: int) -> list[Trajectory]:
        if n == 0 or len(self.buffer) < n:
            return []
        entries = self.buffer.entries()
        picks = self.rng.choice(len(entries), size=n, replace=False)
        return [trajectory_from_actions(self.env, backward_actions(entries[i][0], self.rng)) for i in sorted(picks)]

    def step(self, step: int) -> StepMetrics:
        cfg = self.cfg
        eps = epsilon_at(step, cfg)
        fresh = sample_batch(self.model, self.env, cfg.batch_forward, eps, self.rng) if cfg.batch_forward else []
        trajs = fresh + self.replay_trajectories(cfg.batch_replay)
        log_r = torch.tensor([self.log_reward(t) for t in trajs], dtype=self.model.torch_dtype)
        log_b = torch.tensor([log_pb(t) for t in trajs], dtype=self.model.torch_dtype)
        log_f = batch_log_pf(self.model, self.env, trajs)
        loss = tb_loss(self.model.log_z, log_f, log_b, log_r).mean()
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        for t in fresh:
            self.buffer.insert(t.tree, self._reward_cache[t.tree.key()])
        m = StepMetrics(
            step=step,
            mean_loss=float(loss.detach()),
            log_z=float(self.model.log_z.detach()),
            epsilon=eps,
            buffer_min=self.buffer.min(),
            buffer_max=self.buffer.max(),
            num_trajectories=len(trajs),
        )
        self.history.append(m)
        return m

    def run(self, steps: Optional[int] = None, callback=None) -> list[StepMetrics]:
        for k in range(self.cfg.steps if steps is None else steps):
            m = self.step(len(self.history))
            if callback is not None:
                callback(m)
        return self.history


def train_step(
    model: PolicyModel,
    d: Dataset,
    buf: ReplayBuffer,
    cfg: TrainConfig,
    step: int,
    rng: np.random.Generator,
    p: Optional[RewardParams] = None,
) -> StepMetrics:
    """One update with a caller-owned buffer and RNG.

    Builds a throwaway :class:`Trainer` (so optimizer moments do not carry
    over between calls); use :class:`Trainer` directly for real runs.
    """
    p = p or RewardParams.default(d.num_classes, d.d, model.cfg.num_thresholds)
    tr = Trainer(model, d, p, cfg)
    tr.buffer, tr.rng = buf, rng
    return tr.step(step)


def train(
    model: PolicyModel,
    d: Dataset,
    cfg: TrainConfig,
    p: Optional[RewardParams] = None,
    callback=None,
) -> tuple[PolicyModel, list[StepMetrics], ReplayBuffer]:
    p = p or RewardParams.default(d.num_classes, d.d, model.cfg.num_thresholds)
    tr = Trainer(model, d, p, cfg)
    tr.run(callback=callback)
    return model, tr.history, tr.buffer


def metrics_csv(history: list[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for m in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in m.row().items()})
    return buf.getvalue()
