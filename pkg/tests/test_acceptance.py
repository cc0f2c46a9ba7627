"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Training experiments share a cache so every (h, lambda, mask, seed) point is
trained once per session.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dgmae import evaluation as E
from dgmae import graphcore as gc
from dgmae import losses as L
from dgmae import model as M
from dgmae import train as T
from dgmae.cli import probe_accuracy

from . import test_losses, test_tensorad
from .helpers import dense_sym_norm, random_graph, record
from .test_model import arc_loop_target

SEEDS = range(5)
# desk-scale training setup shared by the synthetic experiments
EXPERIMENT = dict(
    mask_ratio=0.75, lr=5e-3, weight_decay=2e-4, epochs=150, hidden_dim=32, heads=2,
    num_layers=1, gamma1=3.0, gamma2=3.0, p_c=0.3, p_tau=0.7,
)
_CACHE: dict = {}


def synthetic(h: float, seed: int):
    return gc.generate_synthetic(gc.SyntheticSpec(600, 5, h, 8, 32, 3.0, seed=seed))


def experiment(h: float, lam: float, seed: int, mask: float = EXPERIMENT["mask_ratio"]):
    """(probe accuracy, mean hetero-edge cosine) of one trained model."""
    key = (h, lam, seed, mask)
    if key not in _CACHE:
        g, X, y = synthetic(h, seed)
        cfg = T.RunConfig(**dict(EXPERIMENT, lam=lam, mask_ratio=mask, seed=seed))
        params, _ = T.fit(cfg, g, X)
        H = T.embed(params, g, X)
        _CACHE[key] = (probe_accuracy(H, y, seed), E.pairwise_similarity_histogram(H, g, y).hetero_mean)
    return _CACHE[key]


def test_criterion_1_operators():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    op_err = ident_err = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 65))
        g = random_graph(n, float(rng.uniform(0.0, 0.4)), rng)
        X = rng.standard_normal((n, int(rng.integers(1, 6))))
        A = dense_sym_norm(g)
        adj = gc.sym_norm_adjacency_apply(g, X)
        lap = gc.laplacian_discrepancy(g, X)
        # isolated nodes have an all-zero row in both the operator and its oracle
        op_err = max(op_err, np.max(np.abs(adj - A @ X)), np.max(np.abs(lap - (np.eye(n) - A) @ X)))
        ident_err = max(ident_err, np.max(np.abs(adj + lap - X)))
    elapsed = time.perf_counter() - start
    ok = op_err <= 1e-9 and ident_err <= 1e-12 and elapsed < 5
    record(1, ok, f"max oracle err {op_err:.1e}, identity err {ident_err:.1e}, {elapsed:.2f}s")


def test_criterion_2_gradients():
    start = time.perf_counter()
    for seed in range(20):
        test_tensorad.test_binary_ops_gradients(seed)
        test_tensorad.test_unary_ops_gradients(seed)
        test_tensorad.test_sparse_ops_gradients(seed)
    test_losses.test_end_to_end_gradient_small_graph(np.random.default_rng(12345))
    elapsed = time.perf_counter() - start
    record(2, elapsed < 60, f"all per-op (1e-4) and end-to-end (1e-3) checks passed in {elapsed:.1f}s")


def test_criterion_3_discrepancy_target():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(50):
        n = int(rng.integers(2, 40))
        g = random_graph(n, float(rng.uniform(0.1, 0.5)), rng)
        X = rng.standard_normal((n, 4))
        if k == 0:
            m = np.zeros(g.num_arcs, bool)
        elif k == 1:
            m = np.ones(g.num_arcs, bool)
        else:
            m = rng.random(g.num_arcs) < rng.uniform()
        worst = max(worst, np.max(np.abs(M.masked_discrepancy_target(X, g, m) - arc_loop_target(X, g, m)), initial=0.0))
    record(3, worst <= 1e-12, f"max err {worst:.1e} over 50 instances")


def test_criterion_4_pull_push():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 16))
        k = int(rng.integers(0, 10))
        xs = rng.standard_normal((k + 1, d))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        z = rng.standard_normal(d) * rng.uniform(0.1, 10)
        lhs, rhs = L.pull_push_identity_check(z, xs[0], xs[1:])
        worst = max(worst, abs(lhs - rhs))
    record(4, worst <= 1e-9, f"max |lhs - rhs| {worst:.1e}")


def test_criterion_5_selection_rate():
    m = M.select_discrepancy_edges(M.AttentionWeights(np.full(10_000, 0.5)), 0.3, 0.7, seed=5).m
    rate = float(m.mean())
    record(5, abs(rate - 0.15) <= 0.01, f"rate {rate:.4f} vs 0.15")


def test_criterion_6_hetero_similarity_shift():
    start = time.perf_counter()
    pairs = [(experiment(0.1, 0.5, s)[1], experiment(0.1, 0.0, s)[1]) for s in SEEDS]
    elapsed = time.perf_counter() - start
    wins = sum(a < b for a, b in pairs)
    detail = ", ".join(f"{a:.3f}<{b:.3f}" for a, b in pairs)
    record(6, wins == 5 and elapsed < 300, f"{wins}/5 seeds lower [{detail}], {elapsed:.0f}s")


def test_criterion_7_heterophily_advantage():
    lines, ok = [], True
    for h in (0.0, 0.1):
        full = np.mean([experiment(h, 0.5, s)[0] for s in SEEDS])
        base = np.mean([experiment(h, 0.0, s)[0] for s in SEEDS])
        ok &= full - base >= 0.03
        lines.append(f"h={h}: {full:.3f} vs {base:.3f}")
    record(7, ok, "; ".join(lines))


def test_criterion_7_texas_soft():
    path = os.environ.get("DGMAE_TEXAS_FILE")
    if not path:
        pytest.skip("set DGMAE_TEXAS_FILE to a converted Texas graph to run")
    g, X, y = gc.load_graph(path)
    accs = []
    for s in range(10):
        params, _ = T.fit(T.preset("texas", seed=s), g, X)
        accs.append(E.linear_probe(T.embed(params, g, X), y, E.random_split(g.n, seed=s)))
    assert np.mean(accs) >= 0.75


def test_criterion_8_mask_robustness():
    acc = {
        (lam, r): np.array([experiment(0.1, lam, s, mask=r)[0] for s in SEEDS])
        for lam in (0.0, 1.0)
        for r in (0.5, 0.8)
    }
    drop0 = float(np.mean(acc[0.0, 0.5] - acc[0.0, 0.8]))
    drop1 = float(np.mean(acc[1.0, 0.5] - acc[1.0, 0.8]))
    record(8, drop1 < drop0, f"drop 0.5->0.8: lambda=1 {drop1:+.4f}, lambda=0 {drop0:+.4f}")


def test_criterion_9_metric_sanity():
    rng = np.random.default_rng(9)
    y = rng.integers(0, 5, 1000)
    pred = rng.integers(0, 5, 1000)
    self_scores = [E.nmi(y, y), E.ari(y, y), E.cluster_acc(y, y), E.macro_f1(y, E.hungarian_map(y, y))]
    a, n = E.ari(y, pred), E.nmi(y, pred)
    ok = all(v == 1.0 for v in self_scores) and abs(a) <= 0.02 and n <= 0.05
    record(9, ok, f"self {self_scores}, chance ARI {a:+.4f}, NMI {n:.4f}")


def test_criterion_10_cli_determinism(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text('{"n": 120, "C": 3, "h": 0.1, "avg_degree": 6, "feature_dim": 8, "class_sep": 3.0, "seed": 7}')
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"epochs": 20, "hidden_dim": 16, "heads": 4, "num_layers": 2, "lr": 0.005, "seed": 11}')
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        for argv in (
            ["generate", "--spec", spec, "--out", d / "g.txt"],
            ["train", "--config", cfg, "--data", d / "g.txt", "--out", d / "m.ckpt", "--history", d / "h.csv"],
        ):
            subprocess.run([sys.executable, "-m", "dgmae.cli", *map(str, argv)], check=True)
        outputs.append(((d / "h.csv").read_bytes(), (d / "m.ckpt").read_bytes(), (d / "g.txt").read_bytes()))
    same = outputs[0] == outputs[1]
    record(10, same, "history, checkpoint and graph files byte-identical" if same else "outputs differ")


def test_cora_edge_homophily():
    path = os.environ.get("DGMAE_CORA_FILE")
    if not path:
        pytest.skip("set DGMAE_CORA_FILE to a converted Cora graph to run")
    g, _, y = gc.load_graph(Path(path))
    assert gc.edge_homophily(g, y) == pytest.approx(0.81, abs=0.005)
