"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, DATA_DIR, make_dataset
from dtgfn import cli
from dtgfn.data import SplitSpec, domain_shift_split, gen_anomaly_blobs, gen_hidden_xor, load_csv, train_test_split
from dtgfn.env import TreeEnv
from dtgfn.inference import Ensemble, evaluate, f1_binary, normalized_weights, ood_classify, ood_scores, sample_trees, select_map_tree
from dtgfn.policy import PolicyConfig, PolicyModel
from dtgfn.reward import RewardParams, log_marginal_likelihood
from dtgfn.training import TrainConfig, Trainer
from dtgfn.tree import TERMINATE, LeafStats, Split, apply_action, empty_state, leaf_counts, route_rows
from oracles import mc_marginal_likelihood
from test_policy import finite_difference_errors


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


TABLE_1 = {
    (10, 1): "1.000 x 10^1", (10, 2): "1.000 x 10^3", (10, 3): "5.329 x 10^6", (10, 4): "5.609 x 10^13",
    (20, 1): "2.000 x 10^1", (20, 2): "8.000 x 10^3", (20, 3): "9.411 x 10^8", (20, 4): "8.358 x 10^18",
}


def test_criterion_1_search_space_counts():
    t0 = time.perf_counter()
    got = {}
    for p in (10, 20):
        rows = cli.cmd_count_space(p, 4)
        for r in rows:
            got[(p, r["depth"])] = r["scientific"]
    elapsed = time.perf_counter() - t0
    ok = got == TABLE_1 and elapsed < 1.0
    record(1, ok, f"8/8 values match={got == TABLE_1}, {elapsed:.3f}s")
    assert got == TABLE_1
    assert elapsed < 1.0


def test_criterion_2_oracle_posterior_fit():
    args = cli.build_parser().parse_args(["oracle-check"])
    assert (args.n, args.num_noise, args.num_thresholds, args.d_max, args.steps, args.samples) == (200, 1, 1, 2, 2000, 10_000)
    t0 = time.perf_counter()
    rep = cli.cmd_oracle_check(args)
    elapsed = time.perf_counter() - t0
    tv, gap = rep["tv_distance"], rep["log_z_gap"]
    ok = tv <= 0.15 and gap <= 0.1 and elapsed < 300
    record(2, ok, f"{rep['num_trees']} trees, tv={tv:.4f} (<=0.15), log_z gap={gap:.4f} (<=0.1), {elapsed:.0f}s (<300)")
    assert tv <= 0.15
    assert gap <= 0.1
    assert elapsed < 300


def test_criterion_3_marginal_likelihood_vs_monte_carlo():
    rng = np.random.default_rng(2024)
    worst = 0.0
    failures = 0
    for _ in range(50):
        C = int(rng.integers(2, 4))
        L = int(rng.integers(1, 4))
        n = int(rng.integers(0, 11))
        # n <= 10 rows spread over L leaves and C classes
        flat = np.bincount(rng.integers(0, L * C, size=n), minlength=L * C)
        counts = flat.reshape(L, C)
        alpha = rng.uniform(0.1, 3.0, size=C)
        est, se = mc_marginal_likelihood(counts, alpha, 100_000, rng)
        exact = math.exp(log_marginal_likelihood(LeafStats(tuple(range(L)), counts), alpha))
        z = abs(est - exact) / se if se > 0 else (0.0 if est == exact else math.inf)
        worst = max(worst, z)
        failures += z > 3
    record(3, failures == 0, f"50 cases, max |MC - exact| = {worst:.2f} SE (<=3), {failures} outside")
    assert failures == 0


def test_criterion_4_gradient_fidelity():
    errors = finite_difference_errors(0)
    worst = max(errors.values())
    record(4, worst <= 1e-4, f"{len(errors)} tensors, max relative error {worst:.2e} (<=1e-4)")
    assert worst <= 1e-4, errors


def test_criterion_5_hidden_xor_recovery():
    t0 = time.perf_counter()
    accs = []
    for seed in (0, 1, 2):
        d = gen_hidden_xor(1000, 18, "binary", seed=seed)
        train, test = train_test_split(d, SplitSpec(seed=seed))
        model = PolicyModel(PolicyConfig(d.d, 1, 3, seed=seed))
        p = RewardParams.default(d.num_classes, d.d)
        Trainer(model, train, p, TrainConfig(steps=200, seed=seed)).run()
        best = select_map_tree(sample_trees(model, train, 1000, np.random.default_rng(seed)), train, p)
        accs.append(evaluate(best, test, train, p).accuracy)
    elapsed = time.perf_counter() - t0
    ok = min(accs) >= 0.99 and elapsed < 600
    record(5, ok, f"MAP test accuracy per seed {[round(a, 3) for a in accs]} (>=0.99), {elapsed:.0f}s (<600)")
    assert min(accs) >= 0.99
    assert elapsed < 600


def test_criterion_6_iris_single_tree(tmp_path):
    cfg = cli.RunConfig(dataset=str(DATA_DIR / "iris.csv"), label_column="species", seeds=[1, 2, 3, 4, 5])
    t0 = time.perf_counter()
    run = cli.cmd_train(cfg, str(tmp_path / "iris"), quiet=True)
    rep = cli.cmd_eval(run, "single", None)
    elapsed = time.perf_counter() - t0
    for s in cfg.seeds:
        assert len((run / f"metrics-seed{s}.csv").read_text(encoding="utf-8").strip().splitlines()) == 1 + 100
    acc, size = rep["accuracy"], rep["model_size"]
    per = [(r["accuracy"], r["model_size"]) for r in rep["per_seed"]]
    ok = acc >= 0.92 and size <= 15 and elapsed < 1800
    record(6, ok, f"mean accuracy {acc:.3f} (>=0.92), mean size {size:.1f} (<=15), per seed {per}, {elapsed:.0f}s (<1800)")
    assert acc >= 0.92
    assert size <= 15
    assert elapsed < 1800


def test_criterion_7_ensemble_consistency():
    rng = np.random.default_rng(7)
    worst_sum = 0.0
    argmax_changes = 0
    stump = apply_action(empty_state(3), TERMINATE)
    X = np.zeros((1, 2))
    for _ in range(10_000):
        m = int(rng.integers(1, 20))
        spread = rng.uniform(0, 1e3)
        lp = rng.uniform(-spread, 0, size=m) + rng.normal(0, 100)
        w = normalized_weights(lp)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        params = tuple(rng.dirichlet(np.ones(3), size=1) for _ in range(m))
        shift = rng.uniform(-1e3, 1e3)
        a = Ensemble((stump,) * m, lp, params, (0.1,) * 3)
        b = Ensemble((stump,) * m, lp + shift, params, (0.1,) * 3)
        argmax_changes += int(a.predict(X)[0] != b.predict(X)[0])
    ok = worst_sum <= 1e-9 and argmax_changes == 0
    record(7, ok, f"10^4 cases, max |sum w - 1| = {worst_sum:.1e} (<=1e-9), argmax changes under shift: {argmax_changes}")
    assert worst_sum <= 1e-9
    assert argmax_changes == 0


def test_criterion_8_mask_soundness():
    rng = np.random.default_rng(8)
    empty_children = 0
    over_bound = 0
    for _ in range(10_000):
        n, dim, C = int(rng.integers(1, 15)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        X = rng.choice([0.0, 0.2, 0.4, 0.6, 0.8, 1.0], size=(n, dim))
        d = make_dataset(X, rng.integers(0, C, n), C)
        d_max, t = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        env = TreeEnv(d, d_max, t)
        b = env.builder()
        # every split adds one frontier leaf; capacity caps decision nodes at 2**d_max - 1
        bound = min(2**d_max - 1, n - 1) + 1
        steps = 0
        while not b.state.terminal and steps <= bound:
            options = [TERMINATE] + [Split(s, env.rule_from_flat(int(f))) for s in b.frontier for f in np.flatnonzero(b.masks[s].reshape(-1))]
            b.step(options[int(rng.integers(len(options)))])
            steps += 1
        over_bound += int(not b.state.terminal or steps > bound)
        tree = b.state
        leaves = route_rows(tree, d.features)
        for slot in tree.decision_slots():
            for child in (2 * slot + 1, 2 * slot + 2):
                reach = np.zeros(len(leaves), dtype=bool)
                for k in set(leaves.tolist()):
                    j = k
                    while j > child:
                        j = (j - 1) // 2
                    if j == child:
                        reach |= leaves == k
                empty_children += int(not reach.any())
        assert leaf_counts(tree, d).total == n
    ok = empty_children == 0 and over_bound == 0
    record(8, ok, f"10^4 rollouts, empty children: {empty_children}, over the step bound: {over_bound}")
    assert empty_children == 0
    assert over_bound == 0


def test_criterion_9_ood_rule():
    f1s, baselines = [], []
    for seed in range(1, 6):
        train, test = gen_anomaly_blobs(200, 20, 2, seed=seed)
        model = PolicyModel(PolicyConfig(train.d, 99, 3, seed=seed))
        p = RewardParams.default(train.num_classes, train.d)
        Trainer(model, train, p, TrainConfig(seed=seed)).run()
        ens = Ensemble.build(sample_trees(model, train, 1000, np.random.default_rng(seed)), train, p)
        flags = ood_classify(ood_scores(ens, test.features))
        truth = test.labels == 1
        f1s.append(f1_binary(truth.astype(int), flags.astype(int)))
        baselines.append(f1_binary(truth.astype(int), np.zeros(test.n, dtype=int)))
    ok = all(f > b for f, b in zip(f1s, baselines))
    record(9, ok, f"anomaly F1 per seed {[round(f, 3) for f in f1s]} vs all-normal baseline {baselines}")
    assert ok


def test_criterion_10_distribution_shift(tmp_path):
    pima = load_csv(DATA_DIR / "pima.csv", "outcome")
    sizes = {}
    for name, thr, n_id in (("bmi", 30, 60), ("age", 29, 80)):
        tr, te_id, te_ood = domain_shift_split(pima, pima.feature_names.index(name), thr, n_id, seed=42)
        sizes[name] = (tr.n, te_id.n, te_ood.n)
    exact = sizes == {"bmi": (243, 60, 465), "age": (316, 80, 372)}
    # OOD accuracy is reported, not thresholded (reference hyperparameters, one seed)
    cfg = cli.RunConfig(dataset=str(DATA_DIR / "pima.csv"), label_column="outcome")
    acc = {}
    for name, thr, n_id in (("bmi", 30, 60), ("age", 29, 80)):
        rep = cli.cmd_shift(cfg, name, thr, n_id, 42, str(tmp_path / name))
        acc[name] = {k: round(v, 3) for k, v in rep["single"].items()}
    record(10, exact, f"sizes {sizes}; MAP-tree accuracy (reported only) {acc}")
    assert exact
