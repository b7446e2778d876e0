"""Command-line entry points: gen-data, train, sweep, eval.

Relative paths in configs resolve against ``$MIXSEG_OUT_DIR`` (default: the
working directory). Exit codes: 0 success, 1 config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from .data import ShapesSceneSpec, generate_dataset, load_dataset, write_dataset
from .metrics import result_columns, result_row, summarize, summary_table
from .model import ReferenceNet, TrainingDivergence, load_checkpoint
from .trainer import ConfigError, ExperimentConfig, evaluate, run

log = logging.getLogger("mixseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SCENE_FIELDS = {f.name for f in fields(ShapesSceneSpec)} - {"colors"}
GEN_DEFAULTS = {"num_train": 240, "num_val": 60, "labeled_fraction": 1 / 8}
DEFAULT_SWEEP_OVERRIDES = {"none": {"lam": 0.0}}


def out_root() -> Path:
    return Path(os.environ.get("MIXSEG_OUT_DIR", "."))


def resolve(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p if p.is_absolute() else out_root() / p


def load_config(path: str | os.PathLike) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return cfg


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    cfg = dict(cfg)
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(key, "override must look like key=value")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def require(cfg: dict, *names: str) -> None:
    for name in names:
        if name not in cfg:
            raise ConfigError(name, "missing required field")


def experiment_config(cfg: dict, extra: set[str]) -> ExperimentConfig:
    return ExperimentConfig.from_dict({k: v for k, v in cfg.items() if k not in extra})


# --- gen-data ---------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> Path:
    require(cfg, "dataset_dir", "seed")
    allowed = SCENE_FIELDS | set(GEN_DEFAULTS) | {"dataset_dir", "seed"}
    for key in cfg:
        if key not in allowed:
            raise ConfigError(key, "unknown config field")
    opts = {**GEN_DEFAULTS, **cfg}
    try:
        spec = ShapesSceneSpec(**{k: opts[k] for k in SCENE_FIELDS if k in opts})
    except (TypeError, ValueError) as exc:
        raise ConfigError("scene", str(exc)) from None
    try:
        ds = generate_dataset(spec, int(opts["num_train"]), int(opts["num_val"]), int(opts["seed"]),
                              float(opts["labeled_fraction"]))
    except ValueError as exc:
        raise ConfigError("labeled_fraction", str(exc)) from None
    root = resolve(cfg["dataset_dir"])
    write_dataset(ds, root)
    log.info("wrote %d images to %s", len(ds.images), root)
    return root


# --- train ------------------------------------------------------------------

TRAIN_EXTRA = {"dataset_dir", "run_dir"}


def default_run_dir(exp: ExperimentConfig) -> Path:
    return Path("runs") / f"{exp.strategy}-f{exp.labeled_fraction:.4g}-s{exp.seed}"


def describe_plan(exp: ExperimentConfig) -> str:
    semi = exp.total_iters - exp.warmup_iters
    return (f"plan: {exp.warmup_iters} supervised warmup iterations, then {semi} "
            f"{exp.strategy} semi-supervised iterations (lambda={exp.lam}, tau={exp.tau}); "
            f"lr {exp.lr0} -> 0 by poly({exp.poly_power})")


def cmd_train(cfg: dict, dry_run: bool = False) -> Path | None:
    require(cfg, "dataset_dir", "seed", "strategy")
    exp = experiment_config(cfg, TRAIN_EXTRA)
    if dry_run:
        print(json.dumps({**exp.to_dict(), **{k: cfg[k] for k in TRAIN_EXTRA if k in cfg}}, indent=2))
        print(describe_plan(exp))
        return None
    ds = load_dataset(resolve(cfg["dataset_dir"]))
    run_dir = resolve(cfg.get("run_dir", default_run_dir(exp)))
    result = run(exp, ds, run_dir)
    write_rows(run_dir / "result.csv", [result_row(exp.strategy, exp.labeled_fraction, exp.seed,
                                                   result.confusion, ds.num_classes)], ds.num_classes)
    log.info("%s seed %d: mIoU %.4f -> %s", exp.strategy, exp.seed, result.miou, run_dir)
    return run_dir


def write_rows(path: Path, rows: list[dict], num_classes: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=result_columns(num_classes), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --- sweep ------------------------------------------------------------------

SWEEP_EXTRA = {"dataset_dir", "sweep_dir", "strategies", "fractions", "seeds", "strategy_overrides"}


def cmd_sweep(cfg: dict, resume: bool = False) -> Path:
    """Run every (strategy, fraction, seed) cell; failures are recorded and skipped past."""
    require(cfg, "dataset_dir", "strategies", "fractions", "seeds")
    base = {k: v for k, v in cfg.items() if k not in SWEEP_EXTRA}
    overrides = cfg.get("strategy_overrides", DEFAULT_SWEEP_OVERRIDES)
    strategies = list(cfg["strategies"])
    fractions = [float(f) for f in cfg["fractions"]]
    seeds = [int(s) for s in cfg["seeds"]]
    plans = {}
    for s in strategies:
        for f in fractions:
            for seed in seeds:
                plans[(s, f, seed)] = ExperimentConfig.from_dict(
                    {**base, **overrides.get(s, {}), "strategy": s, "labeled_fraction": f, "seed": seed})

    ds = load_dataset(resolve(cfg["dataset_dir"]))
    sweep_dir = resolve(cfg.get("sweep_dir", "sweep"))
    results_path = sweep_dir / "results.csv"
    rows = read_rows(results_path) if resume else []
    done = {(r["strategy"], float(r["labeled_fraction"]), int(r["seed"])) for r in rows if r["status"] == "ok"}
    rows = [r for r in rows if r["status"] == "ok"]

    for (s, f, seed), exp in plans.items():
        if (s, f, seed) in done:
            log.info("skip %s f=%g seed=%d (already done)", s, f, seed)
            continue
        t0 = time.perf_counter()
        try:
            result = run(exp, ds, sweep_dir / "runs" / f"{s}-f{f:.4g}-s{seed}")
            rows.append(result_row(s, f, seed, result.confusion, ds.num_classes))
            log.info("%s f=%g seed=%d mIoU %.4f (%.1fs)", s, f, seed, result.miou, time.perf_counter() - t0)
        except Exception as exc:  # one bad cell must not sink the sweep
            log.error("%s f=%g seed=%d failed: %s", s, f, seed, exc)
            rows.append(result_row(s, f, seed, None, ds.num_classes, status=f"failed: {exc}"))
        write_rows(results_path, rows, ds.num_classes)

    write_rows(results_path, rows, ds.num_classes)
    table = summary_table(summarize(rows), strategies, fractions)
    with open(sweep_dir / "summary.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table)
    for line in table:
        print("  ".join(f"{c:>16}" for c in line))
    return sweep_dir


# --- eval -------------------------------------------------------------------

def cmd_eval(cfg: dict) -> float:
    require(cfg, "dataset_dir", "checkpoint")
    ds = load_dataset(resolve(cfg["dataset_dir"]))
    params = load_checkpoint(resolve(cfg["checkpoint"]))
    width = params.values["conv1.w"].shape[0]
    net = ReferenceNet(ds.num_classes, width=width)
    val = ds.split.validation
    cm = evaluate(net, params, ds.images[val], ds.labels[val])
    for c, v in enumerate(cm.iou_per_class()):
        print(f"class {c}: IoU {v:.4f}")
    print(f"mIoU {cm.mean_iou():.4f}")
    return cm.mean_iou()


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "train", "sweep", "eval"):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                       help="override a config field (value parsed as JSON when possible)")
        if name == "train":
            p.add_argument("--dry-run", action="store_true", help="print config and plan, do not train")
        if name == "sweep":
            p.add_argument("--resume", action="store_true", help="skip cells with existing result rows")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, dry_run=args.dry_run)
        elif args.command == "sweep":
            cmd_sweep(cfg, resume=args.resume)
        else:
            cmd_eval(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
