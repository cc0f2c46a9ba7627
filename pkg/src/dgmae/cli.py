"""Command-line entry point: ``dgmae <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
All files written are deterministic functions of the inputs and seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import graphcore as gc
from . import train as T

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

VARIANTS = ("full", "no-selection", "no-feature", "no-discrepancy")


class UsageError(Exception):
    pass


def variant_config(cfg: T.RunConfig, variant: str) -> T.RunConfig:
    """Config overrides for the component ablations."""
    if variant == "full":
        return cfg
    if variant == "no-selection":
        return dataclasses.replace(cfg, adaptive_selection=False)
    if variant == "no-feature":
        return dataclasses.replace(cfg, lam=1.0)
    if variant == "no-discrepancy":
        return dataclasses.replace(cfg, lam=0.0)
    raise UsageError(f"unknown variant {variant!r}")


def probe_accuracy(H, y, seed: int, splits: int = 5) -> float:
    """Mean linear-probe test accuracy over ``splits`` random 48/32/20 splits."""
    accs = [E.linear_probe(H, y, E.random_split(len(y), seed=1000 * seed + k)) for k in range(splits)]
    return float(np.mean(accs))


def train_and_probe(cfg: T.RunConfig, g, X, y, splits: int = 5) -> float:
    params, _ = T.fit(cfg, g, X)
    return probe_accuracy(T.embed(params, g, X), y, cfg.seed, splits)


def _point(args):
    cfg, spec, data, splits = args
    if spec is not None:
        g, X, y = gc.generate_synthetic(spec)
    else:
        g, X, y = data
    return train_and_probe(cfg, g, X, y, splits)


def run_grid(jobs: list) -> list[float]:
    """Evaluate independent grid points, in parallel when DGMAE_THREADS > 1."""
    workers = max(1, int(os.environ.get("DGMAE_THREADS", "1")))
    if workers == 1 or len(jobs) == 1:
        return [_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_point, jobs))


def _num(x: float) -> str:
    return repr(float(x))


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _emit(text: str, out) -> None:
    if out:
        _write(out, text)
    else:
        sys.stdout.write(text)


def _labels(path):
    g, X, y = gc.load_graph(path)
    if y is None:
        raise gc.MalformedBodyError(f"{path}: labels are required for this command")
    return g, X, y


def _config(args) -> T.RunConfig:
    cfg = T.RunConfig.from_json(args.config) if args.config else T.RunConfig()
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    return cfg


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    return vals


def _save_embeddings(path, H) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in H]
    _write(path, "\n".join(lines) + "\n")


def _load_embeddings(path) -> np.ndarray:
    H = np.loadtxt(path, delimiter=",", ndmin=2)
    return H


def cmd_generate(args) -> None:
    spec = gc.SyntheticSpec(**json.loads(Path(args.spec).read_text(encoding="utf-8")))
    g, X, y = gc.generate_synthetic(spec)
    gc.save_graph(args.out, g, X, y, num_classes=spec.C)
    report = {
        "target_h": spec.h,
        "edge_homophily": gc.edge_homophily(g, y) if g.num_edges else None,
        "local_feature_homophily": gc.local_feature_homophily(g, X),
        "num_edges": g.num_edges,
    }
    _write(str(args.out) + ".homophily.json", json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> None:
    cfg = _config(args)
    g, X, _ = gc.load_graph(args.data)
    params, history = T.fit(cfg, g, X)
    T.save_checkpoint(args.out, params)
    _write(args.history or str(args.out) + ".history.csv", T.history_csv(history))


def cmd_embed(args) -> None:
    params = T.load_checkpoint(args.checkpoint)
    g, X, _ = gc.load_graph(args.data)
    _save_embeddings(args.out, T.embed(params, g, X))


def cmd_probe(args) -> None:
    _, _, y = _labels(args.data)
    H = _load_embeddings(args.embeddings)
    accs = [E.linear_probe(H, y, E.random_split(len(y), seed=args.seed + k)) for k in range(args.splits)]
    lines = ["split,acc"] + [f"{k},{_num(a)}" for k, a in enumerate(accs)]
    lines.append(f"mean,{_num(np.mean(accs))}")
    lines.append(f"std,{_num(np.std(accs))}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_cluster(args) -> None:
    _, _, y = _labels(args.data)
    H = _load_embeddings(args.embeddings)
    rep = E.kmeans_cluster(H, y, int(y.max()) + 1, seeds=args.seeds)
    lines = ["metric,mean,std"] + [f"{k},{_num(m)},{_num(s)}" for k, m, s in rep.rows()]
    _emit("\n".join(lines) + "\n", args.out)


def cmd_similarity(args) -> None:
    g, _, y = _labels(args.data)
    H = _load_embeddings(args.embeddings)
    _emit(E.pairwise_similarity_histogram(H, g, y, bins=args.bins).to_csv(), args.out)


def cmd_ablate(args) -> None:
    g, X, y = _labels(args.data)
    base = _config(args)
    variants = args.variant or list(VARIANTS)
    jobs = [
        (dataclasses.replace(variant_config(base, v), seed=s), None, (g, X, y), args.splits)
        for v in variants
        for s in range(args.seeds)
    ]
    accs = np.array(run_grid(jobs)).reshape(len(variants), args.seeds)
    lines = ["variant,acc_mean,acc_std"]
    lines += [f"{v},{_num(a.mean())},{_num(a.std())}" for v, a in zip(variants, accs)]
    _emit("\n".join(lines) + "\n", args.out)


def _synthetic(args, h: float, seed: int) -> gc.SyntheticSpec:
    return gc.SyntheticSpec(args.n, args.classes, h, args.degree, args.feature_dim, args.class_sep, seed=seed)


def cmd_sweep_homophily(args) -> None:
    if not args.h_list:
        raise UsageError("empty homophily grid")
    base = _config(args)
    jobs = [
        (dataclasses.replace(base, seed=s), _synthetic(args, h, s), None, args.splits)
        for h in args.h_list
        for s in range(args.seeds)
    ]
    accs = np.array(run_grid(jobs)).reshape(len(args.h_list), args.seeds)
    lines = ["h,acc_mean,acc_std"] + [f"{h},{_num(a.mean())},{_num(a.std())}" for h, a in zip(args.h_list, accs)]
    _emit("\n".join(lines) + "\n", args.out)


def cmd_sweep_mask(args) -> None:
    if not args.ratios:
        raise UsageError("empty mask-ratio grid")
    base = _config(args)
    data = _labels(args.data) if args.data else None
    jobs = []
    for r in args.ratios:
        for s in range(args.seeds):
            cfg = dataclasses.replace(base, mask_ratio=r, seed=s)
            jobs.append((cfg, None if data else _synthetic(args, args.h, s), data, args.splits))
    accs = np.array(run_grid(jobs)).reshape(len(args.ratios), args.seeds)
    lines = ["ratio,acc_mean,acc_std"] + [f"{r},{_num(a.mean())},{_num(a.std())}" for r, a in zip(args.ratios, accs)]
    _emit("\n".join(lines) + "\n", args.out)


def _add_synthetic_flags(p) -> None:
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--degree", type=float, default=8.0)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--class-sep", type=float, default=3.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgmae", description="Discrepancy-aware graph masked auto-encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic graph with controlled homophily")
    p.add_argument("--spec", required=True, help="JSON with n, C, h, avg_degree, feature_dim, class_sep, seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="pre-train and write a checkpoint plus loss history")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write frozen embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="linear-probe accuracy over random splits")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("cluster", help="k-means clustering scores")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("similarity", help="edge cosine-similarity histogram")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("ablate", help="component ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", action="append", choices=VARIANTS)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-homophily", help="accuracy across synthetic homophily levels")
    p.add_argument("--h-list", required=True, type=_float_list)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    _add_synthetic_flags(p)
    p.set_defaults(func=cmd_sweep_homophily)

    p = sub.add_parser("sweep-mask", help="accuracy across mask ratios")
    p.add_argument("--ratios", required=True, type=_float_list)
    p.add_argument("--data", help="graph file; a synthetic graph is generated per seed when omitted")
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    _add_synthetic_flags(p)
    p.set_defaults(func=cmd_sweep_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dgmae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NumericalError, FloatingPointError) as exc:
        print(f"dgmae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (gc.GraphError, T.CheckpointError, OSError, ValueError, TypeError) as exc:
        print(f"dgmae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
