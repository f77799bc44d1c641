"""Forward policy, uniform backward policy and trajectory sampling.

The forward policy embeds every frontier leaf's root-to-leaf path with a
shared MLP.  A rule head maps each leaf embedding to ``d * t`` split logits;
a termination head maps the mean of the frontier embeddings to one logit.
All unmasked split logits and the termination logit share one softmax.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .env import Builder, Trace, TreeEnv, replay
from .tree import (
    TERMINATE,
    Action,
    LegalMask,
    Split,
    Terminate,
    TreeState,
    block_size,
    leaf_path_encoding,
    remove_node,
    removable_nodes,
    unterminate,
)

NEG = -1e30
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    num_features: int
    num_thresholds: int
    d_max: int
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    head_hidden: int = 256
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def input_size(self) -> int:
        return self.d_max * block_size(self.num_features)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _mlp(sizes: Sequence[int], final_act: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or k < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class PolicyModel(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden_sizes
        self.encoder = _mlp([cfg.input_size, *H], final_act=True)
        self.term_head = _mlp([H[-1], cfg.head_hidden, 1], final_act=False)
        self.rule_head = _mlp([H[-1], cfg.head_hidden, cfg.num_features * cfg.num_thresholds], final_act=False)
        self.log_z = nn.Parameter(torch.zeros(()))
        self._init_weights()
        self.to(self.torch_dtype)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.cfg.dtype == "float64" else torch.float32

    def _init_weights(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.weight.uniform_(-bound, bound, generator=g)
                    m.bias.zero_()
            # zero output layers: the initial policy is uniform over legal actions
            for head in (self.term_head, self.rule_head):
                head[-1].weight.zero_()

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.torch_dtype)

    def policy_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n != "log_z"]


@dataclass
class ActionDistribution:
    actions: list
    log_probs: np.ndarray

    def prob(self, a: Action) -> float:
        for b, lp in zip(self.actions, self.log_probs):
            if b == a:
                return float(math.exp(lp))
        return 0.0

    def total(self) -> float:
        return float(np.exp(self.log_probs).sum())


@dataclass
class Trajectory:
    states: list
    actions: list
    step_log_pf: list = field(default_factory=list)
    trace: Optional[Trace] = field(default=None, repr=False)
    builder: Optional[Builder] = field(default=None, repr=False)

    @property
    def tree(self) -> TreeState:
        return self.states[-1]

    @property
    def log_pf(self) -> float:
        return float(sum(self.step_log_pf))

    def __len__(self) -> int:
        return len(self.actions)


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(v - m).sum()))


def forward(model: PolicyModel, s: TreeState, mask: LegalMask) -> ActionDistribution:
    """Action distribution at ``s``: Terminate first, then unmasked splits by (slot, feature, threshold)."""
    if s.terminal:
        raise ValueError("no action distribution at a terminal state")
    cfg = model.cfg
    slots, enc = leaf_path_encoding(s, cfg.num_features)
    with torch.no_grad():
        emb = model.encoder(model.as_tensor(enc))
        term = float(model.term_head(emb.mean(0, keepdim=True)).reshape(()))
        rules = model.rule_head(emb).double().numpy()
    actions: list[Action] = [TERMINATE]
    logits = [term]
    for k, slot in enumerate(slots):
        m = mask.splits[slot].reshape(-1)
        for flat in np.flatnonzero(m):
            f, i = divmod(int(flat), cfg.num_thresholds)
            actions.append(Split(slot, _rule(cfg, f, i)))
            logits.append(rules[k, flat])
    logits = np.asarray(logits, dtype=np.float64)
    return ActionDistribution(actions, logits - _logsumexp(logits))


def _rule(cfg: PolicyConfig, f: int, i: int):
    from .tree import DecisionRule

    return DecisionRule.make(f, i, cfg.num_thresholds)


# ---------------------------------------------------------------------------
# sampling


class _LeafCache:
    __slots__ = ("emb", "logits", "lse", "count")

    def __init__(self, emb, logits, lse, count):
        self.emb, self.logits, self.lse, self.count = emb, logits, lse, count


def _eval_leaves(model: PolicyModel, enc: list, masks: list) -> list[_LeafCache]:
    emb = model.encoder(model.as_tensor(np.stack(enc)))
    raw = model.rule_head(emb).double().numpy()
    out = []
    for k, m in enumerate(masks):
        logits = np.where(m, raw[k], -np.inf)
        out.append(_LeafCache(emb[k], logits, _logsumexp(logits), int(m.sum())))
    return out


def _uniform_pick(builder: Builder, caches: dict, rng: np.random.Generator) -> Action:
    front = builder.frontier
    counts = [caches[s].count for s in front]
    k = int(rng.integers(1 + sum(counts)))
    if k == 0:
        return TERMINATE
    k -= 1
    for slot, c in zip(front, counts):
        if k < c:
            flat = int(np.flatnonzero(builder.masks[slot].reshape(-1))[k])
            return Split(slot, builder.env.rule_from_flat(flat))
        k -= c
    raise AssertionError("unreachable")


def sample_batch(
    model: PolicyModel,
    env: TreeEnv,
    n: int,
    epsilon: float,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Sample ``n`` trajectories in lockstep.

    With probability ``epsilon`` an action is drawn uniformly from the legal
    set, otherwise from the policy.  ``step_log_pf`` always records the
    policy's log-probability of the action actually taken.
    """
    builders = [env.builder() for _ in range(n)]
    trajs = [Trajectory([b.state], []) for b in builders]
    caches: list[dict] = [{} for _ in range(n)]
    active = list(range(n))
    with torch.no_grad():
        while active:
            pending = [(j, s) for j in active for s in builders[j].frontier if s not in caches[j]]
            if pending:
                enc = [builders[j].trace.enc[builders[j].leaf_id[s]] for j, s in pending]
                msk = [builders[j].trace.masks[builders[j].leaf_id[s]] for j, s in pending]
                for (j, s), c in zip(pending, _eval_leaves(model, enc, msk)):
                    caches[j][s] = c
            pooled = torch.stack(
                [torch.stack([caches[j][s].emb for s in builders[j].frontier]).mean(0) for j in active]
            )
            term = model.term_head(pooled).double().numpy().reshape(-1)
            still = []
            for row, j in enumerate(active):
                b, cache = builders[j], caches[j]
                front = b.frontier
                top = np.array([term[row], *(cache[s].lse for s in front)])
                norm = _logsumexp(top)
                if rng.random() < epsilon:
                    a = _uniform_pick(b, cache, rng)
                else:
                    probs = np.exp(top - norm)
                    pick = int(rng.choice(len(top), p=probs / probs.sum()))
                    if pick == 0:
                        a = TERMINATE
                    else:
                        slot = front[pick - 1]
                        lp = cache[slot].logits - cache[slot].lse
                        w = np.exp(lp)
                        flat = int(rng.choice(w.size, p=w / w.sum()))
                        a = Split(slot, env.rule_from_flat(flat))
                if isinstance(a, Terminate):
                    chosen = term[row]
                else:
                    chosen = cache[a.slot].logits[a.rule.feature * env.num_thresholds + a.rule.threshold_index]
                t = trajs[j]
                t.step_log_pf.append(float(chosen - norm))
                b.step(a)
                t.actions.append(a)
                t.states.append(b.state)
                if not b.state.terminal:
                    still.append(j)
            active = still
    for t, b in zip(trajs, builders):
        t.trace = b.trace
        t.builder = b
    return trajs


def sample_trajectory(model: PolicyModel, d: Dataset, epsilon: float, rng: np.random.Generator) -> Trajectory:
    env = TreeEnv(d, model.cfg.d_max, model.cfg.num_thresholds)
    return sample_batch(model, env, 1, epsilon, rng)[0]


def backward_actions(tree: TreeState, rng: np.random.Generator) -> list[Action]:
    """Uniform backward walk from a terminal tree, returned as forward actions."""
    if not tree.terminal:
        raise ValueError("backward sampling starts from a terminal tree")
    s = unterminate(tree)
    removed = []
    while True:
        options = removable_nodes(s)
        if not options:
            break
        k = options[int(rng.integers(len(options)))]
        removed.append(Split(k, s.nodes[k]))
        s = remove_node(s, k)
    return [*reversed(removed), TERMINATE]


def trajectory_from_actions(env: TreeEnv, actions: Sequence[Action]) -> Trajectory:
    b = env.builder()
    states = [b.state]
    for a in actions:
        b.step(a)
        states.append(b.state)
    return Trajectory(states, list(actions), trace=b.trace, builder=b)


def sample_backward_trajectory(tree: TreeState, rng: np.random.Generator, env: Optional[TreeEnv] = None) -> Trajectory:
    """Backward-sampled trajectory; with ``env`` every step is legality-checked."""
    actions = backward_actions(tree, rng)
    if env is not None:
        return trajectory_from_actions(env, actions)
    from .tree import apply_action

    s = unterminate(tree)
    s = type(s)(s.d_max, s.num_thresholds, (None,) * s.num_slots)
    states = [s]
    for a in actions:
        s = apply_action(s, a)
        states.append(s)
    return Trajectory(states, actions)


def log_pb(trajectory: Trajectory) -> float:
    """Uniform backward policy: each step back from s' has probability 1/|parents(s')|."""
    total = 0.0
    for s in trajectory.states[1:]:
        if s.terminal:
            continue
        total -= math.log(len(removable_nodes(s)))
    return total


# ---------------------------------------------------------------------------
# differentiable scoring


def batch_log_pf(model: PolicyModel, env: TreeEnv, trajectories: Sequence[Trajectory]) -> torch.Tensor:
    """Differentiable sum of forward log-probabilities per trajectory."""
    traces = []
    for t in trajectories:
        if t.trace is None:
            t.trace = replay(env, t.actions).trace
        traces.append(t.trace)

    enc, masks = [], []
    st_traj, front_leaf, front_state, act_leaf, act_flat = [], [], [], [], []
    fronts = []
    offset = 0
    n_states = 0
    for ti, tr in enumerate(traces):
        enc.extend(tr.enc)
        masks.extend(tr.masks)
        for front, leaf, flat in tr.steps:
            st_traj.append(ti)
            ids = [offset + f for f in front]
            fronts.append(ids)
            front_leaf.extend(ids)
            front_state.extend([n_states] * len(ids))
            act_leaf.append(offset + leaf if leaf >= 0 else -1)
            act_flat.append(flat)
            n_states += 1
        offset += len(tr.enc)

    U = offset
    dtype = model.torch_dtype
    emb = model.encoder(model.as_tensor(np.stack(enc)))
    mask = torch.as_tensor(np.stack(masks))
    logits = model.rule_head(emb)
    masked = torch.where(mask, logits, torch.full_like(logits, NEG))
    lse = torch.logsumexp(masked, dim=1)
    lse = torch.where(mask.any(dim=1), lse, torch.full_like(lse, NEG))
    lse_ext = torch.cat([lse, torch.full((1,), NEG, dtype=dtype)])

    fl = torch.as_tensor(front_leaf, dtype=torch.long)
    fs = torch.as_tensor(front_state, dtype=torch.long)
    sizes = torch.bincount(fs, minlength=n_states).to(dtype)
    pooled = torch.zeros(n_states, emb.shape[1], dtype=dtype).index_add(0, fs, emb[fl])
    pooled = pooled / sizes[:, None]
    term = model.term_head(pooled).reshape(-1)

    width = max(len(f) for f in fronts)
    pad = np.full((n_states, width), U, dtype=np.int64)
    for k, f in enumerate(fronts):
        pad[k, : len(f)] = f
    top = torch.cat([term[:, None], lse_ext[torch.as_tensor(pad)]], dim=1)
    norm = torch.logsumexp(top, dim=1)

    al = torch.as_tensor(act_leaf, dtype=torch.long)
    af = torch.as_tensor(act_flat, dtype=torch.long)
    is_term = al < 0
    split_logit = masked[al.clamp(min=0), af]
    chosen = torch.where(is_term, term, split_logit)
    step = chosen - norm
    out = torch.zeros(len(traces), dtype=dtype)
    return out.index_add(0, torch.as_tensor(st_traj, dtype=torch.long), step)


def log_pf(model: PolicyModel, trajectory: Trajectory, d: Dataset) -> float:
    """Forward log-probability of ``trajectory``; raises on an illegal step."""
    env = TreeEnv(d, model.cfg.d_max, model.cfg.num_thresholds)
    t = Trajectory(trajectory.states, trajectory.actions)
    with torch.no_grad():
        return float(batch_log_pf(model, env, [t])[0])


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter (zeros if unused)."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: PolicyModel, path, meta: Optional[dict] = None) -> None:
    header = {
        "format": "dtgfn-policy",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "config_digest": model.cfg.digest(),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[PolicyModel, dict]:
    with np.load(path) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != "dtgfn-policy" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a supported policy checkpoint")
        cfg = PolicyConfig(**header["config"])
        if cfg.digest() != header["config_digest"]:
            raise ValueError(f"{path}: config digest mismatch")
        model = PolicyModel(cfg)
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    model.load_state_dict(state)
    return model, header["meta"]
