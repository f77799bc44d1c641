"""Command-line entry point: ``dtgfn <command> ...``.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 runtime error,
4 an acceptance threshold was not met.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .data import DataError, Dataset, SplitSpec
from .reward import RewardParams, beta_default, beta_heuristic, count_trees, count_trees_at_depth, scientific
from .tree import render, to_json

# torch-backed modules are imported inside the commands that need them so
# that count-space and xor start quickly

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "DTGFN_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class ThresholdError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    label_column: str = "label"
    categorical_columns: list = field(default_factory=list)
    train_fraction: float = 0.8
    seeds: list = field(default_factory=lambda: [1])
    d_max: int = 5
    num_thresholds: int = 99
    hidden_sizes: list = field(default_factory=lambda: [256, 256, 256])
    head_hidden: int = 256
    steps: int = 100
    lr: float = 0.01
    lr_log_z: float = 1.0
    batch_forward: int = 90
    batch_replay: int = 10
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    buffer_capacity: int = 100
    alpha: Optional[float] = 0.1
    beta: Optional[float] = None
    beta_rule: str = "table"
    temperature: float = 1.0
    num_samples: int = 1000
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(obj, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.dataset is None:
            raise UsageError("config needs a dataset path")
        if not self.seeds:
            raise UsageError("config needs at least one seed")
        try:
            self.train_config(self.seeds[0])
            self.policy_config(1, self.seeds[0])
        except (ValueError, TypeError) as e:
            raise UsageError(str(e)) from None

    def train_config(self, seed: int):
        from .training import TrainConfig

        return TrainConfig(
            steps=self.steps,
            lr=self.lr,
            lr_log_z=self.lr_log_z,
            batch_forward=self.batch_forward,
            batch_replay=self.batch_replay,
            epsilon_start=self.epsilon_start,
            epsilon_end=self.epsilon_end,
            buffer_capacity=self.buffer_capacity,
            seed=seed,
        )

    def policy_config(self, num_features: int, seed: int):
        from .policy import PolicyConfig

        if self.d_max < 1 or self.num_thresholds < 1:
            raise ValueError("d_max and num_thresholds must be positive")
        return PolicyConfig(num_features, self.num_thresholds, self.d_max, tuple(self.hidden_sizes), self.head_hidden, seed)

    def reward_params(self, d: Dataset) -> RewardParams:
        alpha = (0.1 if self.alpha is None else self.alpha,) * d.num_classes
        if self.beta is not None:
            beta = self.beta
        elif self.beta_rule == "coding":
            beta = beta_heuristic(d.d, self.num_thresholds)
        elif self.beta_rule == "table":
            beta = beta_default(d.d)
        else:
            raise UsageError(f"unknown beta_rule {self.beta_rule!r}")
        return RewardParams(alpha, beta, self.temperature)


def _data_fingerprint(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(d.features).tobytes())
    h.update(np.ascontiguousarray(d.labels).tobytes())
    return h.hexdigest()[:16]


def _load_split(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    full = data_mod.load_csv(cfg.dataset, cfg.label_column, cfg.categorical_columns)
    return data_mod.train_test_split(full, SplitSpec(seed=seed, train_fraction=cfg.train_fraction))


def _run_dir(explicit: Optional[str], cfg: RunConfig, name: str) -> Path:
    if explicit:
        return Path(explicit)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{name}-{cfg.digest()}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out: Optional[str] = None, quiet: bool = False) -> Path:
    from .policy import PolicyModel, save_checkpoint
    from .training import Trainer, metrics_csv

    cfg.validate()
    run = _run_dir(out or cfg.output_dir, cfg, "train")
    # everything that can fail on bad input happens before the run directory exists
    splits = {s: _load_split(cfg, s) for s in cfg.seeds}
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "config.json", cfg.to_dict())
    summary = []
    for seed, (train, _) in splits.items():
        model = PolicyModel(cfg.policy_config(train.d, seed))
        p = cfg.reward_params(train)
        tr = Trainer(model, train, p, cfg.train_config(seed))
        t0 = time.perf_counter()
        tr.run(callback=None if quiet else lambda m: _log(f"seed {seed} step {m.step} loss {m.mean_loss:.4g} log_z {m.log_z:.4g}"))
        elapsed = time.perf_counter() - t0
        tag = "" if len(cfg.seeds) == 1 else f"-seed{seed}"
        save_checkpoint(
            model,
            run / f"checkpoint{tag}.npz",
            meta={"config_digest": cfg.digest(), "seed": seed, "data_fingerprint": _data_fingerprint(train)},
        )
        (run / f"metrics{tag}.csv").write_text(metrics_csv(tr.history), encoding="utf-8")
        _write_json(run / f"buffer{tag}.json", [{"tree": to_json(t), "log_reward": r} for t, r in tr.buffer.entries()])
        summary.append({"seed": seed, "final_loss": tr.history[-1].mean_loss if tr.history else None,
                        "log_z": float(model.log_z.detach()), "train_seconds": elapsed})
    _write_json(run / "train_summary.json", {"config_digest": cfg.digest(), "runs": summary})
    return run


def _checkpoint_path(run: Path, seed: int, multi: bool) -> Path:
    return run / (f"checkpoint-seed{seed}.npz" if multi else "checkpoint.npz")


def cmd_eval(run: Path, mode: str, m: Optional[int], dataset: Optional[str] = None) -> dict:
    from .inference import Ensemble, EvalReport, evaluate, sample_trees, select_map_tree
    from .policy import load_checkpoint

    cfg_path = run / "config.json"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"no config.json in {run}")
    cfg = RunConfig.load(cfg_path)
    if dataset is not None:
        cfg.dataset = dataset
    m = cfg.num_samples if m is None else m
    multi = len(cfg.seeds) > 1
    reports, out = [], []
    for seed in cfg.seeds:
        ckpt = _checkpoint_path(run, seed, multi)
        if not ckpt.is_file():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        model, meta = load_checkpoint(ckpt)
        if meta.get("config_digest") != RunConfig.load(cfg_path).digest():
            raise RuntimeError(f"{ckpt}: config hash does not match {cfg_path}")
        train, test = _load_split(cfg, seed)
        if meta.get("data_fingerprint") != _data_fingerprint(train):
            raise RuntimeError(f"{ckpt}: training data does not match the checkpoint")
        if model.cfg != cfg.policy_config(train.d, seed):
            raise RuntimeError(f"{ckpt}: model shape does not match the config")
        p = cfg.reward_params(train)
        trees = sample_trees(model, train, m, np.random.default_rng(seed))
        if not trees:
            raise ValueError("need at least one sample")
        if mode == "single":
            best = select_map_tree(trees, train, p)
            r = evaluate(best, test, train, p)
            out.append({"seed": seed, "map_tree": to_json(best), "render": render(best, train.feature_names)})
        else:
            r = evaluate(Ensemble.build(trees, train, p), test)
        reports.append(r)
    agg = EvalReport.aggregate(reports, cfg.seeds)
    result = {"mode": mode, "num_samples": m, "config_digest": cfg.digest(), **agg.to_dict()}
    if out:
        result["trees"] = out
    _write_json(run / f"report-{mode}.json", result)
    _write_json(run / "report.json", result)
    return result


def cmd_count_space(p: int, d: int) -> list[dict]:
    if p < d:
        raise UsageError(f"need p >= d (got p={p}, d={d})")
    rows = []
    total = 0
    for depth in range(1, d + 1):
        k = count_trees_at_depth(p, depth)
        total += k
        rows.append({"depth": depth, "count": k, "cumulative": total, "scientific": scientific(total)})
    assert total == count_trees(p, d)
    return rows


def cmd_oracle_check(args) -> dict:
    from .oracle import enumerate_trees, exact_posterior, report as oracle_report, sampler_divergence
    from .policy import PolicyConfig, PolicyModel
    from .training import TrainConfig, Trainer

    if args.dataset:
        d = data_mod.load_csv(args.dataset, args.label_column)
    else:
        d = data_mod.gen_hidden_xor(args.n, args.num_noise, "binary", seed=args.seed)
    trees = enumerate_trees(d, args.d_max, args.num_thresholds, cap=args.cap)
    p = RewardParams.default(d.num_classes, d.d, args.num_thresholds)
    exact = exact_posterior(trees, d, p)
    model = PolicyModel(PolicyConfig(d.d, args.num_thresholds, args.d_max, tuple(args.hidden_sizes), args.head_hidden, args.seed))
    cfg = TrainConfig(steps=args.steps, lr=args.lr, lr_log_z=args.lr_log_z, seed=args.seed)
    t0 = time.perf_counter()
    Trainer(model, d, p, cfg).run()
    tv, gap = sampler_divergence(model, d, exact, args.samples, np.random.default_rng(args.seed + 1))
    rep = oracle_report(exact, tv, gap)
    rep["train_seconds"] = time.perf_counter() - t0
    rep["thresholds"] = {"tv_distance": args.tv_max, "log_z_gap": args.gap_max}
    rep["passed"] = bool(tv <= args.tv_max and gap <= args.gap_max)
    return rep


def cmd_xor(n: int, num_noise: int, noise_kind: str, seed: int, out: str) -> Dataset:
    d = data_mod.gen_hidden_xor(n, num_noise, noise_kind, seed)
    data_mod.write_csv(d, out, label_column="label")
    return d


def cmd_shift(cfg: RunConfig, feature: str, threshold: float, id_test: int, seed: int, out: Optional[str]) -> dict:
    from .inference import Ensemble, evaluate, sample_trees, select_map_tree
    from .policy import PolicyModel
    from .training import Trainer

    full = data_mod.load_csv(cfg.dataset, cfg.label_column, cfg.categorical_columns)
    if feature not in full.feature_names:
        raise data_mod.MissingColumnError(f"no feature named {feature!r}")
    train, test_id, test_ood = data_mod.domain_shift_split(full, full.feature_names.index(feature), threshold, id_test, seed)
    result = {"sizes": {"train": train.n, "test_id": test_id.n, "test_ood": test_ood.n}, "config_digest": cfg.digest()}
    if cfg.steps > 0:
        model = PolicyModel(cfg.policy_config(train.d, seed))
        p = cfg.reward_params(train)
        Trainer(model, train, p, cfg.train_config(seed)).run()
        trees = sample_trees(model, train, cfg.num_samples, np.random.default_rng(seed))
        best = select_map_tree(trees, train, p)
        ens = Ensemble.build(trees, train, p)
        result["single"] = {k: evaluate(best, t, train, p).accuracy for k, t in (("test_id", test_id), ("test_ood", test_ood))}
        result["ensemble"] = {k: evaluate(ens, t).accuracy for k, t in (("test_id", test_id), ("test_ood", test_ood))}
    if out:
        run = Path(out)
        run.mkdir(parents=True, exist_ok=True)
        _write_json(run / "config.json", cfg.to_dict())
        _write_json(run / "report.json", result)
    return result


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_OVERRIDES = (
    ("dataset", str), ("label_column", str), ("d_max", int), ("num_thresholds", int), ("steps", int),
    ("lr", float), ("lr_log_z", float), ("batch_forward", int), ("batch_replay", int),
    ("epsilon_start", float), ("epsilon_end", float), ("buffer_capacity", int), ("alpha", float),
    ("beta", float), ("beta_rule", str), ("temperature", float), ("num_samples", int),
)


def _add_run_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON run config (flags override its values)")
    for name, typ in _OVERRIDES:
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    sp.add_argument("--seeds", type=int, nargs="+", default=None)
    sp.add_argument("--categorical-columns", nargs="*", default=None)
    sp.add_argument("--hidden-sizes", type=int, nargs="+", default=None)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for name in [n for n, _ in _OVERRIDES] + ["seeds", "categorical_columns", "hidden_sizes"]:
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dtgfn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("train", help="train a policy; writes config, checkpoint and metrics")
    _add_run_flags(sp)
    sp.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/train-<hash>)")
    sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a trained run on its held-out split")
    sp.add_argument("run", help="run directory written by 'train'")
    sp.add_argument("--mode", choices=("single", "ensemble"), default="single")
    sp.add_argument("--m", type=int, default=None, help="number of sampled trees")
    sp.add_argument("--dataset", default=None, help="override the dataset path")

    sp = sub.add_parser("count-space", help="exact search-space sizes per depth")
    sp.add_argument("--p", type=int, required=True, help="number of binary features")
    sp.add_argument("--d", type=int, required=True, help="maximum depth")
    sp.add_argument("--json", action="store_true")

    sp = sub.add_parser("oracle-check", help="train on an enumerable instance and compare with the exact posterior")
    sp.add_argument("--dataset", default=None, help="CSV; default is a generated hidden-XOR instance")
    sp.add_argument("--label-column", default="label")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--num-noise", type=int, default=1)
    sp.add_argument("--d-max", type=int, default=2)
    sp.add_argument("--num-thresholds", type=int, default=1)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--lr-log-z", type=float, default=1.0)
    sp.add_argument("--hidden-sizes", type=int, nargs="+", default=[256, 256, 256])
    sp.add_argument("--head-hidden", type=int, default=256)
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--cap", type=int, default=10**6)
    sp.add_argument("--tv-max", type=float, default=0.15)
    sp.add_argument("--gap-max", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="write the report JSON here")

    sp = sub.add_parser("xor", help="write a hidden-XOR dataset as CSV")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--num-noise", type=int, default=18)
    sp.add_argument("--noise-kind", choices=("binary", "real"), default="binary")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("shift", help="domain-shift split, optional training, ID/OOD accuracy")
    _add_run_flags(sp)
    sp.add_argument("--feature", required=True, help="column name to shift on")
    sp.add_argument("--threshold", type=float, required=True, help="in-distribution rows have value <= threshold")
    sp.add_argument("--id-test", type=int, required=True, help="in-distribution test rows")
    sp.add_argument("--split-seed", type=int, default=42)
    sp.add_argument("--out", default=None)
    return ap


def _dispatch(args) -> int:
    if args.command == "train":
        run = cmd_train(_resolve_config(args), args.out, args.quiet)
        print(run)
    elif args.command == "eval":
        print(json.dumps(cmd_eval(Path(args.run), args.mode, args.m, args.dataset), indent=2))
    elif args.command == "count-space":
        rows = cmd_count_space(args.p, args.d)
        if args.json:
            print(json.dumps([{**r, "count": str(r["count"]), "cumulative": str(r["cumulative"])} for r in rows], indent=2))
        else:
            print(f"{'depth':>5}  {'count':>24}  {'cumulative':>24}  scientific")
            for r in rows:
                print(f"{r['depth']:>5}  {r['count']:>24}  {r['cumulative']:>24}  {r['scientific']}")
    elif args.command == "oracle-check":
        rep = cmd_oracle_check(args)
        text = json.dumps(rep, indent=2)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
        if not rep["passed"]:
            raise ThresholdError(f"tv={rep['tv_distance']:.4f} gap={rep['log_z_gap']:.4f} exceed the thresholds")
    elif args.command == "xor":
        d = cmd_xor(args.n, args.num_noise, args.noise_kind, args.seed, args.out)
        print(f"wrote {d.n} rows x {d.d} features to {args.out}")
    elif args.command == "shift":
        cfg = _resolve_config(args)
        if cfg.dataset is None:
            raise UsageError("shift needs --dataset or a config with a dataset")
        print(json.dumps(cmd_shift(cfg, args.feature, args.threshold, args.id_test, args.split_seed, args.out), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except UsageError as e:
        print(f"dtgfn: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"dtgfn: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ThresholdError as e:
        print(f"dtgfn: threshold not met: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (RuntimeError, ValueError) as e:  # includes CapExceeded
        print(f"dtgfn: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
