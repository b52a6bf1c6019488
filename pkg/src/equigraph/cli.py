"""Command-line entry point: ``equigraph gen|train|evaluate|check|gradcheck|report|rerun``.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 runtime error.
Every command that writes files also writes ``manifest.json`` next to its
outputs; ``equigraph rerun --manifest PATH`` replays it.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .blocks import Model, ModelConfig, preset
from .geometry import DEFAULT_GAMMA_RANGE, figure_one_graph
from .graph import Dataset, GraphFormatError, load_dataset, read_graph_json, save_dataset
from .harness import (GROUPS, RESULT_COLUMNS, aggregate_row, check_equivariance, evaluate,
                      grad_check, gradcheck_samples, load_checkpoint, parse_cell,
                      read_results_csv, rows_to_csv, run_seeds)
from .polytopes import TEST_COLUMNS, make_augmented_trainset, make_dataset

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
FAMILIES = ("orthogonal", "orthogonal-dilation", "non-orthogonal", "table")


class UsageError(Exception):
    pass


def column_name(family: str, mu: float) -> str:
    for column, (fam, m) in TEST_COLUMNS.items():
        if fam == family and (fam != "non-orthogonal" or m == mu):
            return column
    return f"test_mu{mu:g}"


def write_manifest(out: Path, command: str, argv: Sequence[str], **fields) -> None:
    doc = {"command": command, "argv": list(argv), "tool_version": __version__,
           "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **fields}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- gen ------------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    if args.mu < 0:
        raise UsageError("--mu must be non-negative")
    if args.copies < 0 or args.augment_k < 0:
        raise UsageError("--copies and --augment-k must be non-negative")
    if not 0 < args.gamma_min <= args.gamma_max:
        raise UsageError("need 0 < --gamma-min <= --gamma-max")
    if args.dim not in (3, 4, 5):
        raise UsageError("--dim must be 3, 4 or 5")
    gamma = (args.gamma_min, args.gamma_max)
    common = dict(gamma_range=gamma, seed=args.seed, random_gamma=not args.fixed_gamma,
                  node_features=args.node_features)
    if args.family == "table":
        wanted = list(TEST_COLUMNS.items())
    else:
        wanted = [(column_name(args.family, args.mu), (args.family, args.mu))]
    out = Path(args.out)
    train = None
    for column, (family, mu) in wanted:
        train, test = make_dataset(args.dim, family, mu, copies=args.copies, **common)
        test.metadata["column"] = column
        save_dataset(test, out / column)
        print(f"{column}: {len(test)} samples")
    train_family, train_mu = wanted[0][1]
    if args.augment_k:
        train = make_augmented_trainset(args.dim, train_family, args.augment_k, mu=train_mu,
                                        **common)
    save_dataset(train, out / "train")
    print(f"train: {len(train)} samples, classes {train.metadata['classes']}")
    write_manifest(out, "gen", argv, seed=args.seed, outputs=sorted(
        p.name for p in out.iterdir() if p.is_dir()))
    return EXIT_OK


# --- train ----------------------------------------------------------------------------

def load_splits(data: Path) -> dict[str, Dataset]:
    if not (data / "train").is_dir():
        raise FileNotFoundError(f"{data} has no train/ split (run `equigraph gen` first)")
    splits = {"train": load_dataset(data / "train")}
    for path in sorted(data.glob("test_*")):
        if path.is_dir():
            splits[path.name] = load_dataset(path)
    return splits


def model_config(args, num_classes: int) -> ModelConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        cfg = ModelConfig.from_dict(doc)
    else:
        block, _, rho = args.preset.partition(":")
        cfg = preset(block, rho or "sum", args.psi, num_classes=num_classes)
    if cfg.readout.num_classes != num_classes:
        raise ValueError(f"config has {cfg.readout.num_classes} classes but the data has "
                         f"{num_classes}")
    return cfg


def cmd_train(args, argv) -> int:
    if args.seeds < 1 or args.epochs < 0:
        raise UsageError("--seeds must be positive and --epochs non-negative")
    data, out = Path(args.data), Path(args.out)
    splits = load_splits(data)
    meta = splits["train"].metadata
    num_classes = int(meta.get("num_classes", len(set(splits["train"].labels.tolist()))))
    cfg = model_config(args, num_classes)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    runs = run_seeds(cfg, splits, seeds, args.epochs, args.lr, args.workers)
    out.mkdir(parents=True, exist_ok=True)
    for seed, (result, ckpt) in zip(seeds, runs):
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        (seed_dir / "checkpoint.json").write_text(ckpt)
        (seed_dir / "run.json").write_text(json.dumps(result.to_dict()) + "\n")
        cols = " ".join(f"{k}={v:.4f}" for k, v in result.test_acc.items())
        print(f"seed {seed}: train_acc={result.train_acc:.4f} {cols}")
    results = [r for r, _ in runs]
    row = aggregate_row(cfg, results, meta.get("dim", 0), meta.get("augment_k", 0))
    (out / "results.csv").write_text(rows_to_csv([row]))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    write_manifest(out, "train", argv, config=cfg.to_dict(), seeds=seeds,
                   data=str(data), outputs=["results.csv", *[f"seed_{s}" for s in seeds]])
    return EXIT_OK


# --- evaluate / check ------------------------------------------------------------------

def load_graphs(source: str, limit: int | None):
    if source == "figure1":
        return [figure_one_graph()[0]]
    path = Path(source)
    if path.is_file():
        return [read_graph_json(path)]
    samples = list(load_dataset(path))
    return samples[:limit] if limit else samples


def cmd_evaluate(args, argv) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.samples and ds.samples[0].dims != model.dims:
        raise ValueError(f"checkpoint expects {model.dims}, data has {ds.samples[0].dims}")
    print(f"accuracy={evaluate(model, ds):.4f} samples={len(ds)}")
    return EXIT_OK


def cmd_check(args, argv) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    model = load_checkpoint(args.checkpoint)
    graphs = load_graphs(args.data, args.max_graphs)
    report = check_equivariance(model, graphs, args.group, args.trials, args.tol, args.seed,
                                (args.gamma_min, args.gamma_max))
    print(report.summary())
    if not report.passed:
        print("worst case: " + json.dumps(report.worst))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "equivariance.json").write_text(json.dumps([report.to_dict()], indent=2) + "\n")
        write_manifest(out, "check", argv, checkpoint=str(args.checkpoint), data=args.data,
                       outputs=["equivariance.json"])
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_gradcheck(args, argv) -> int:
    cfg = model_config(args, args.classes).with_seed(args.seed)
    samples = gradcheck_samples(args.dim, args.classes, args.seed)
    model = Model(cfg, samples[0].dims)
    report = grad_check(model, samples, h=args.h, tol=args.tol, coords=args.coords,
                        seed=args.seed)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


# --- report ----------------------------------------------------------------------------

def render_table(rows: list[dict]) -> str:
    cols = ["block", "rho", "psi", "dim", "train_acc", *TEST_COLUMNS, "seed_count"]
    if any(r.get("augment_k") not in (None, "", "0") for r in rows):
        cols.append("augment_k")

    def cell(row, col):
        value = row.get(col) or ""
        if col == "train_acc" or col in TEST_COLUMNS:
            if not value:
                return "-"
            mean, std = parse_cell(value)
            return f"{mean:.2f} ± {std:.2f}"
        return str(value)

    body = [[cell(r, c) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[k]) for b in body)) if body else len(c)
              for k, c in enumerate(cols)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def render_json(rows: list[dict]) -> str:
    parsed, series = [], {}
    for r in rows:
        entry = {k: r.get(k, "") for k in RESULT_COLUMNS}
        for col in ("train_acc", *TEST_COLUMNS):
            mean, std = parse_cell(r.get(col) or "")
            entry[col] = None if np.isnan(mean) else {"mean": mean, "std": std}
        parsed.append(entry)
        key = f"{r.get('block')}/{r.get('rho')}/dim{r.get('dim')}"
        k = int(r.get("augment_k") or 0)
        for col in TEST_COLUMNS:
            if entry[col] is not None:
                series.setdefault(key, {}).setdefault(col, []).append(
                    {"k": k, **entry[col]})
    for cols in series.values():
        for points in cols.values():
            points.sort(key=lambda p: p["k"])
    return json.dumps({"rows": parsed, "series": series}, indent=2)


def cmd_report(args, argv) -> int:
    text = "".join(Path(p).read_text() if k == 0 else
                   Path(p).read_text().split("\n", 1)[1]
                   for k, p in enumerate(args.inputs))
    rows = read_results_csv(text)
    print(render_table(rows) if args.format == "table" else render_json(rows))
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    if doc.get("command") == "rerun" or "argv" not in doc:
        raise ValueError(f"{args.manifest} is not a replayable manifest")
    return main(doc["argv"])


# --- parser ----------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config", help="model config JSON")
    group.add_argument("--preset", default="agn:sum",
                       help="BLOCK:RHO with BLOCK in gn|dgn|sdgn|agn|combined|dgn* (default agn:sum)")
    p.add_argument("--psi", choices=("identity", "weighted"), default="identity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equigraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a polytope dataset")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--family", choices=FAMILIES, default="table")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--gamma-min", type=float, default=DEFAULT_GAMMA_RANGE[0])
    p.add_argument("--gamma-max", type=float, default=DEFAULT_GAMMA_RANGE[1])
    p.add_argument("--fixed-gamma", action="store_true",
                   help="no dilation in the non-orthogonal family")
    p.add_argument("--copies", type=int, default=20)
    p.add_argument("--augment-k", type=int, default=0)
    p.add_argument("--node-features", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one config over several seeds")
    _model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check", help="numerical equivariance check")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="dataset split directory, graph JSON file, or 'figure1'")
    p.add_argument("--group", choices=GROUPS, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--gamma-min", type=float, default=1e-2)
    p.add_argument("--gamma-max", type=float, default=1e2)
    p.add_argument("--max-graphs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference gradients")
    _model_flags(p)
    p.add_argument("--dim", type=int, choices=(3, 4, 5), default=3)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render results.csv files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"equigraph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, GraphFormatError, RuntimeError) as exc:
        print(f"equigraph {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
