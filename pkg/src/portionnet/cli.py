"""Command-line entry point: ``portionnet {generate,train,evaluate,sweep,losscheck}``.

Configuration precedence is flags > config file > ``PORTIONNET_SEED`` (seed
only) > built-in defaults. Exit codes: 0 success, 1 invalid input or
configuration, 2 runtime failure, 3 integrity failure (corrupt or mismatched
files).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path
from typing import Any

import yaml

from portionnet import __version__
from portionnet.config import RunConfig, dump_config, load_run_config
from portionnet.errors import ConfigError, IntegrityError, PortionNetError

log = logging.getLogger("portionnet")

SEED_ENV = "PORTIONNET_SEED"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 1, 2, 3

ALPHA_GRID = (0.0, 0.3, 0.5)
LAMBDA_GRID = (0.0, 0.5, 1.0)
DEFAULT_ALPHA = 0.3
DEFAULT_LAMBDA = 0.5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds must list distinct integers, got {text!r}")
    return seeds


def _parse_sets(items: list[str] | None) -> dict[str, Any]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _file_keys(path) -> set[str]:
    """Dotted keys present in a config file (used to report where values came from)."""
    if path is None:
        return set()
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError):
        return set()

    def walk(node, prefix):
        if isinstance(node, dict):
            for k, v in node.items():
                yield from walk(v, f"{prefix}{k}.")
        else:
            yield prefix[:-1]

    return set(walk(raw, ""))


def env_seed() -> int | None:
    value = os.environ.get(SEED_ENV)
    if value is None or value.strip() == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def resolve_config(config_path, flag_overrides: dict[str, Any], seed_key: str) -> tuple[RunConfig, dict[str, str]]:
    """Build the effective config and a map of non-default keys to their source."""
    flags = {k: v for k, v in flag_overrides.items() if v is not None}
    file_keys = _file_keys(config_path)
    overrides = dict(flags)
    sources = {k: "flag" for k in flags}
    for k in file_keys:
        sources.setdefault(k, "file")
    if seed_key not in flags and seed_key not in file_keys:
        seed = env_seed()
        if seed is not None:
            overrides[seed_key] = seed
            sources[seed_key] = f"env {SEED_ENV}"
    return load_run_config(config_path, overrides), sources


def announce(cfg: RunConfig, sources: dict[str, str], config_path) -> None:
    print(f"portionnet {__version__}", file=sys.stderr)
    print(f"precedence: flags > file ({config_path or 'none'}) > {SEED_ENV} (seed only) > defaults", file=sys.stderr)
    for key in sorted(sources):
        print(f"  {key}: {sources[key]}", file=sys.stderr)
    print("effective config:", file=sys.stderr)
    print(dump_config(cfg).rstrip(), file=sys.stderr)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, extra: dict | None = None) -> Path:
    """List every artifact under ``out_dir`` with its size and sha256."""
    out_dir = Path(out_dir)
    files = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"):
            files.append({"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_file(p)})
    doc = {"command": command, "version": __version__, "artifacts": files, **(extra or {})}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    from portionnet.data import generate_synthetic_dataset, save_dataset

    cfg, sources = resolve_config(args.config, {"data.seed": args.seed, **_parse_sets(args.set)}, "data.seed")
    announce(cfg, sources, args.config)
    out = Path(args.out)
    _ensure_empty(out, args.force)
    if out.exists() and args.force:
        for p in sorted(out.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    splits = generate_synthetic_dataset(cfg.data)
    save_dataset(splits, out)
    write_manifest(out, "generate", {"n_samples": len(splits["all"]), "class_count": cfg.data.class_count})
    _emit({"out": str(out), "n_samples": len(splits["all"]), "n_train": len(splits["train"]), "n_test": len(splits["test"])})
    return EXIT_OK


# ---------------------------------------------------------------- train

def _with_dataset_config(cfg: RunConfig, splits) -> RunConfig:
    """The dataset's own data section wins over the run config's."""
    stored = splits["all"].config
    if stored is None:
        if splits["all"].class_count != cfg.model.class_count:
            raise ConfigError(
                f"dataset has {splits['all'].class_count} classes, config expects {cfg.model.class_count}"
            )
        return cfg
    raw = cfg.model_dump(mode="json")
    raw["data"] = stored.model_dump(mode="json")
    raw["model"]["class_count"] = stored.class_count
    raw["model"]["n_points"] = stored.n_points
    return RunConfig.model_validate(raw)


def train_one(cfg_dict: dict, data_dir: str, out_dir: str) -> dict:
    """Train one configuration and write its artifacts; returns both final reports. Process-safe."""
    from portionnet.data import load_dataset
    from portionnet.evaluation import evaluate
    from portionnet.training import train

    cfg = RunConfig.model_validate(cfg_dict)
    splits = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    result = train(splits["train"], cfg, val_set=splits["test"], out_dir=out)
    seed = cfg.training.seed
    final = {
        m: evaluate(result.model, splits["test"], m, cfg.evaluation.batch_size, seed=seed).to_dict()
        for m in ("rgb", "rgbpc")
    }
    doc = {"seed": seed, "train_seconds": time.perf_counter() - t0, "mode_counts": result.mode_counts, "final": final}
    (out / "final_metrics.json").write_text(json.dumps(doc, indent=1) + "\n")
    write_manifest(out, "train", {"seed": seed})
    return doc


def _aggregate_final(docs: list[dict]) -> dict:
    from portionnet.evaluation import MetricsReport, aggregate_reports

    return {m: aggregate_reports([MetricsReport.from_dict(d["final"][m]) for d in docs]) for m in ("rgb", "rgbpc")}


def cmd_train(args) -> int:
    from portionnet.data import load_dataset

    flags = {
        "training.alpha": args.alpha,
        "training.task_weights.distill": args.lambda_distill,
        "training.task_weights.reg": args.lambda_reg,
        "training.epochs": args.epochs,
        "training.seed": args.seed,
        **_parse_sets(args.set),
    }
    cfg, sources = resolve_config(args.config, flags, "training.seed")
    splits = load_dataset(args.data)
    cfg = _with_dataset_config(cfg, splits)
    announce(cfg, sources, args.config)
    out = Path(args.out)
    _ensure_empty(out, args.force)
    seeds = _parse_seeds(args.seeds)
    if seeds is None:
        doc = train_one(cfg.model_dump(mode="json"), args.data, str(out))
        _emit(doc["final"])
        return EXIT_OK
    docs = []
    for s in seeds:
        raw = cfg.model_dump(mode="json")
        raw["training"]["seed"] = s
        docs.append(train_one(raw, args.data, str(out / f"seed-{s}")))
    agg = _aggregate_final(docs)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1) + "\n")
    write_manifest(out, "train", {"seeds": seeds})
    _emit(agg)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def evaluate_checkpoint(path, data_dir, mode: str, batch_size: int = 64) -> dict:
    from portionnet.checkpoint import load_checkpoint, restore_model
    from portionnet.data import load_dataset
    from portionnet.evaluation import evaluate

    ckpt = load_checkpoint(path)
    model = restore_model(ckpt)
    splits = load_dataset(data_dir)
    seed = ckpt.metadata.get("seed")
    return evaluate(model, splits["test"], mode, batch_size, seed=seed).to_dict()


def cmd_evaluate(args) -> int:
    from portionnet.evaluation import MetricsReport, aggregate_reports, format_aggregate

    modes = ("rgb", "rgbpc") if args.mode == "both" else (args.mode,)
    seeds = _parse_seeds(args.seeds)
    if seeds is None:
        if "{seed}" in args.checkpoint:
            raise ConfigError("checkpoint path contains {seed} but --seeds was not given")
        paths = {None: args.checkpoint}
    else:
        if "{seed}" not in args.checkpoint:
            raise ConfigError("--seeds needs a checkpoint path template containing {seed}")
        paths = {s: args.checkpoint.format(seed=s) for s in seeds}
    result: dict[str, Any] = {}
    for mode in modes:
        reports = {s: evaluate_checkpoint(p, args.data, mode, args.batch_size) for s, p in paths.items()}
        if seeds is None:
            result[mode] = reports[None]
        else:
            agg = aggregate_reports([MetricsReport.from_dict(r) for r in reports.values()])
            print(format_aggregate(agg), file=sys.stderr)
            result[mode] = {"per_seed": {str(s): r for s, r in reports.items()}, "aggregate": agg}
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _emit(result)
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def sweep_points(grid: str) -> list[tuple[str, float, float]]:
    """Grid points as (ablation, alpha, lambda_distill); the shared default point appears once."""
    points: list[tuple[str, float, float]] = []
    if grid in ("alpha", "full"):
        points += [("alpha", a, DEFAULT_LAMBDA) for a in ALPHA_GRID]
    if grid in ("lambda", "full"):
        points += [("lambda", DEFAULT_ALPHA, lam) for lam in LAMBDA_GRID]
    seen, unique = set(), []
    for name, a, lam in points:
        if (a, lam) not in seen:
            seen.add((a, lam))
            unique.append((name, a, lam))
    return unique


def point_dir(alpha: float, lam: float) -> str:
    return f"alpha{alpha:g}_lambda{lam:g}"


def check_out_dirs(out: Path, dirs: list[str], data_dir: Path) -> None:
    if len(set(dirs)) != len(dirs):
        raise ConfigError(f"sweep grid maps two points to the same output directory: {dirs}")
    out_r, data_r = out.resolve(), data_dir.resolve()
    if out_r == data_r or data_r in out_r.parents or out_r in data_r.parents:
        raise ConfigError(f"sweep output {out} overlaps the dataset directory {data_dir}")


def format_table(rows: list[dict]) -> str:
    head = "| ablation | alpha | lambda_distill | RGB vol MAE (mL) | RGB vol MAPE (%) | RGB energy MAPE (%) | RGB acc (%) | RGB+PC vol MAPE (%) | best |"
    lines = [head, "|" + "---|" * 9]
    for r in rows:
        m, p = r["rgb"], r["rgbpc"]
        lines.append(
            f"| {r['ablation']} | {r['alpha']:g} | {r['lambda_distill']:g} | {m['volume_mae']['mean']:.2f} ± {m['volume_mae']['std']:.2f} "
            f"| {m['volume_mape']['mean']:.2f} | {m['energy_mape']['mean']:.2f} | {m['accuracy']['mean']:.1f} "
            f"| {p['volume_mape']['mean']:.2f} | {'*' if r['best'] else ''} |"
        )
    return "\n".join(lines)


def mark_best(rows: list[dict]) -> None:
    best = min(range(len(rows)), key=lambda i: rows[i]["rgb"]["volume_mae"]["mean"])
    for i, r in enumerate(rows):
        r["best"] = i == best


def cmd_sweep(args) -> int:
    from portionnet.data import load_dataset

    flags = {"training.epochs": args.epochs, "training.seed": args.seed, **_parse_sets(args.set)}
    cfg, sources = resolve_config(args.config, flags, "training.seed")
    splits = load_dataset(args.data)
    cfg = _with_dataset_config(cfg, splits)
    announce(cfg, sources, args.config)
    out = Path(args.out)
    points = sweep_points(args.grid)
    check_out_dirs(out, [point_dir(a, lam) for _, a, lam in points], Path(args.data))
    _ensure_empty(out, args.force)
    seeds = _parse_seeds(args.seeds) or [cfg.training.seed]

    jobs = []
    for name, a, lam in points:
        for s in seeds:
            raw = cfg.model_dump(mode="json")
            raw["training"]["alpha"] = a
            raw["training"]["task_weights"]["distill"] = lam
            raw["training"]["seed"] = s
            jobs.append(((name, a, lam), raw, str(out / point_dir(a, lam) / f"seed-{s}")))

    t0 = time.perf_counter()
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel, mp_context=get_context("spawn")) as pool:
            futures = [pool.submit(train_one, raw, args.data, d) for _, raw, d in jobs]
            docs = [f.result() for f in futures]
    else:
        docs = [train_one(raw, args.data, d) for _, raw, d in jobs]

    rows = []
    for name, a, lam in points:
        mine = [doc for (key, _, _), doc in zip(jobs, docs) if key == (name, a, lam)]
        rows.append({"ablation": name, "alpha": a, "lambda_distill": lam, "dir": point_dir(a, lam), **_aggregate_final(mine)})
    mark_best(rows)
    table = format_table(rows)
    (out / "sweep.json").write_text(json.dumps({"seeds": seeds, "rows": rows}, indent=1) + "\n")
    (out / "table.md").write_text(table + "\n")
    write_manifest(out, "sweep", {"seeds": seeds, "seconds": time.perf_counter() - t0})
    print(table, file=sys.stderr)
    _emit({"rows": [{k: r[k] for k in ("ablation", "alpha", "lambda_distill", "best")} | {
        "rgb_volume_mae": r["rgb"]["volume_mae"]["mean"]} for r in rows]})
    return EXIT_OK


# ---------------------------------------------------------------- losscheck

def cmd_losscheck(args) -> int:
    from portionnet import losscheck

    ok, text = losscheck.main(perturb=args.perturb)
    print(text)
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="portionnet", description="Cross-modal distillation for RGB portion estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="YAML/JSON run config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="data.seed")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="any dotted config key, e.g. data.class_count=6")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and write checkpoint, logs and final metrics")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory written by 'generate'")
    t.add_argument("--out", required=True)
    t.add_argument("--alpha", type=float, help="training.alpha: fraction of RGB-only steps")
    t.add_argument("--lambda-distill", type=float, help="training.task_weights.distill")
    t.add_argument("--lambda-reg", type=float, help="training.task_weights.reg")
    t.add_argument("--epochs", type=int, help="training.epochs")
    t.add_argument("--seed", type=int, help="training.seed")
    t.add_argument("--seeds", help="comma-separated seeds; one run per seed under OUT/seed-N plus aggregate.json")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="any dotted config key, e.g. model.pool_aggregation=max")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate checkpoint(s) on a dataset's test split")
    e.add_argument("--checkpoint", required=True, help="path; may contain {seed} together with --seeds")
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("rgb", "rgbpc", "both"), default="rgb")
    e.add_argument("--seeds", help="comma-separated seeds substituted into {seed}; reports mean and std")
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--out", help="also write the report to this JSON file")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="alpha / lambda_distill ablation grid")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", choices=("alpha", "lambda", "full"), default="full")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--parallel", type=int, default=1, help="worker processes (grid points are independent)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("losscheck", help="run every loss oracle and gradient check")
    c.add_argument("--perturb", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_losscheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as err:
        print(f"integrity error: {err}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (PortionNetError, RuntimeError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
