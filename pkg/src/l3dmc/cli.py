"""Command-line entry point: ``l3dmc run | compare | inspect-checkpoint | gen-data``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric
failure during training, 4 unreadable or incompatible inputs. Failures print
a one-line JSON error record on stderr; ``run`` also leaves ``error.json`` in
its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .datasets import make_blobs, make_tree_data, write_binary, write_csv
from .experiment import (
    OUT_ENV,
    PRESETS,
    CompareError,
    ConfigError,
    RunFailed,
    compare_runs,
    default_out_dir,
    load_run_files,
    render_table,
    resolve_config,
    run_experiment,
)
from .model import load_checkpoint, read_checkpoint_header

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INPUT = 0, 2, 3, 4

# flag dest -> dotted config path
FLAG_FIELDS = {
    "method": "method",
    "memory": "memory_capacity",
    "tasks": "num_tasks",
    "beta": "kernel.beta",
    "lambda_e": "kernel.lambda_e",
    "lambda_h": "kernel.lambda_h",
    "curvature": "kernel.curvature",
    "kd_scale": "kernel.kd_scale",
    "bandwidth": "kernel.bandwidth",
    "lr": "optimizer.lr",
    "epochs": "optimizer.epochs",
    "batch_size": "optimizer.batch_size",
    "clip": "optimizer.clip",
    "patience": "optimizer.patience",
    "feat_dim": "model.feat_dim",
    "proj_dim": "model.proj_dim",
    "dataset": "dataset.kind",
    "data_path": "dataset.path",
}


class UsageError(ValueError):
    pass


def parse_seed_list(text: str) -> list[int]:
    """``"1,2,3"``, ``"1-5"`` or a mix such as ``"1-3,7"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                lo_i, hi_i = int(lo), int(hi)
                if hi_i < lo_i:
                    raise ValueError
                seeds.extend(range(lo_i, hi_i + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list item {part!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key.path=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_config(args) -> dict:
    """defaults < preset < --config file < flags."""
    file_tree = None
    if args.config:
        try:
            file_tree = json.loads(Path(args.config).read_text())
        except OSError as err:
            raise ConfigError([("--config", str(err))]) from None
        except json.JSONDecodeError as err:
            raise ConfigError([("--config", f"invalid JSON: {err}")]) from None
    overrides = {path: getattr(args, dest) for dest, path in FLAG_FIELDS.items()
                 if getattr(args, dest) is not None}
    if args.seed_list is not None:
        overrides["seeds"] = args.seed_list
    if args.save_checkpoints:
        overrides["save_checkpoints"] = True
    overrides.update(_parse_set(args.set or []))
    base = PRESETS[args.preset] if args.preset else None
    return resolve_config(file_tree, overrides, base=base)


def _emit_error(record: dict) -> None:
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    try:
        cfg = build_config(args)
    except ConfigError as err:
        _emit_error(err.to_record())
        return EXIT_CONFIG
    if args.dry_run:
        sys.stdout.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    out_dir = Path(args.out) if args.out else default_out_dir(cfg)
    try:
        outcome = run_experiment(cfg, out_dir, jobs=args.jobs)
    except ConfigError as err:
        _emit_error(err.to_record())
        return EXIT_CONFIG
    except RunFailed as err:
        _emit_error(err.record)
        return EXIT_NUMERIC
    final = outcome.summary["final"]
    line = {"out": str(outcome.out_dir), "method": cfg["method"], "seeds": cfg["seeds"],
            "final_acc": final["acc"], "final_forgetting": final["forgetting"]}
    sys.stdout.write(json.dumps(line, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        table = compare_runs(load_run_files(args.results))
    except CompareError as err:
        _emit_error({"error": "compare", "message": str(err)})
        return EXIT_INPUT
    text = render_table(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, body in (("comparison.json", json.dumps(table, indent=2, sort_keys=True) + "\n"),
                           ("comparison.txt", text)):
            tmp = out / (name + ".tmp")
            tmp.write_text(body)
            os.replace(tmp, out / name)
    if args.json:
        sys.stdout.write(json.dumps(table, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        header = read_checkpoint_header(args.checkpoint)
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        _emit_error({"error": "checkpoint", "message": str(err), "path": str(args.checkpoint)})
        return EXIT_INPUT
    header["fingerprint"] = model.fingerprint()
    header["num_parameters"] = sum(p.data.size for p in model.parameters())
    sys.stdout.write(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        if args.generator == "blobs":
            ds = make_blobs(args.num_classes, args.per_class, args.dim, args.spread, args.seed)
        else:
            ds = make_tree_data(args.branching, args.depth, args.per_leaf, args.dim, args.noise, args.seed)
    except ValueError as err:
        _emit_error({"error": "config", "message": str(err)})
        return EXIT_CONFIG
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.name}.{'csv' if args.format == 'csv' else 'bin'}"
    (write_csv if args.format == "csv" else write_binary)(ds, path)
    line = {"path": str(path), "num_samples": len(ds), "num_classes": ds.num_classes, "dim": ds.in_dim}
    sys.stdout.write(json.dumps(line, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l3dmc", description="Mixed-curvature kernel distillation for "
                                "class-incremental learning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one config over a list of seeds")
    r.add_argument("--config", metavar="PATH", help="JSON config file")
    r.add_argument("--preset", choices=sorted(PRESETS), help="bundled benchmark to start from")
    r.add_argument("--seed-list", type=parse_seed_list, help="e.g. 1,2,3 or 1-5")
    r.add_argument("--method", choices=["l3dmc", "replay", "lower_bound", "euclidean_only", "joint"])
    r.add_argument("--memory", type=int, help="exemplar memory capacity")
    r.add_argument("--tasks", type=int, help="number of tasks")
    r.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV}/<method>-<hash>)")
    r.add_argument("--beta", type=float, help="weight of the hyperbolic term")
    r.add_argument("--lambda-e", type=float, help="Euclidean kernel bandwidth")
    r.add_argument("--lambda-h", type=float, help="hyperbolic kernel bandwidth")
    r.add_argument("--curvature", type=float, help="ball curvature c > 0")
    r.add_argument("--kd-scale", type=float, help="weight of the distillation loss")
    r.add_argument("--bandwidth", choices=["fixed", "median"])
    r.add_argument("--lr", type=float)
    r.add_argument("--epochs", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--clip", type=float)
    r.add_argument("--patience", type=int)
    r.add_argument("--feat-dim", type=int, help="feature dimension D")
    r.add_argument("--proj-dim", type=int, help="projection dimension d")
    r.add_argument("--dataset", choices=["blobs", "tree", "csv", "binary"])
    r.add_argument("--data-path", help="CSV or binary dataset file")
    r.add_argument("--save-checkpoints", action="store_true")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field by dotted path, value parsed as JSON")
    r.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
    r.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate Acc_t and F_t per method")
    c.add_argument("results", nargs="+", help="seed result files or run directories")
    c.add_argument("--out", metavar="DIR", help="also write comparison.json and comparison.txt here")
    c.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and fingerprint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--generator", choices=["blobs", "tree"], default="blobs")
    g.add_argument("--format", choices=["binary", "csv"], default="binary")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--name", default="dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--spread", type=float, default=0.3)
    g.add_argument("--branching", type=int, default=2)
    g.add_argument("--depth", type=int, default=3)
    g.add_argument("--per-leaf", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.15)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        _emit_error({"error": "usage", "message": str(err)})
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
