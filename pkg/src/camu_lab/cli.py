"""Experiment runner: train, split, unlearn, evaluate and relearn across seeds.

Usage::

    camu-lab run --config experiment.toml [--seed N]... [--out DIR] [--summary]
    camu-lab validate --config experiment.toml

Command-line flags override values from the config file, which override the
built-in defaults. Exit codes: 0 success, 2 invalid config, 3 data load
failure, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import data as data_mod
from .eval import METRIC_FIELDS, MetricsReport, Splits, average_reports, evaluate, relearn_curve
from .unlearn import (
    METHODS,
    DivergenceError,
    TrainConfig,
    UnlearnConfig,
    camu,
    finetune,
    neg_grad,
    timed_retrain,
    train,
)

log = logging.getLogger("camu_lab")

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("method", "task", "seed") + METRIC_FIELDS + ("wall_time_seconds",)
RELEARN_COLUMNS = ("method", "task", "seed", "epoch", "gap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "dataset": {
        "kind": "synthetic",
        "num_classes": 10,
        "per_class": 300,
        "dim": 100,
        "spread": 1.5,
        "seed": 0,
        "test_fraction": 0.2,
    },
    "model": {"architecture": [100, 128, 64, 10]},
    "train": {"epochs": 40, "learning_rate": 0.05, "batch_size": 32},
    "unlearn": {"T": 5, "learning_rate": 0.001, "batch_size": 32},
    "neg_grad": {"forget_weight": 1.0},
    "task": {"mode": "random_fraction", "fraction": 0.1},
    "run": {
        "methods": ["retrain", "finetune", "neg_grad", "camu"],
        "seeds": [0, 1, 2, 3, 4],
        "relearn_epochs": 0,
        "output_dir": "runs/default",
        "timing": True,
        "workers": 1,
    },
}


class ConfigError(ValueError):
    pass


class DataLoadError(RuntimeError):
    pass


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(raw: Mapping) -> dict:
    """Fill defaults under a raw (parsed TOML) config, tolerating a missing dataset kind."""
    raw = dict(raw)
    kind = raw.get("dataset", {}).get("kind", "synthetic") if isinstance(raw.get("dataset"), Mapping) else "synthetic"
    base = copy.deepcopy(DEFAULTS)
    if kind != "synthetic":
        base["dataset"] = {"kind": kind, "num_classes": 10, "test_fraction": None}
    task = raw.get("task")
    if isinstance(task, Mapping) and task.get("mode") == "class_removal":
        base["task"] = {"mode": "class_removal"}
    return _merge(base, raw)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(raw: Mapping) -> list[str]:
    """Diagnostics for a config mapping; empty iff the config is runnable.

    Each diagnostic reads ``<section.field>: <violated constraint>``.
    """
    cfg = resolve(raw)
    diags: list[str] = []

    def need(cond: bool, where: str, msg: str):
        if not cond:
            diags.append(f"{where}: {msg}")

    known = set(DEFAULTS)
    for section in cfg:
        need(section in known, section, "unknown section")
    for section in known:
        need(isinstance(cfg.get(section), Mapping), section, "must be a table")
    if diags:
        return diags

    ds = cfg["dataset"]
    kind = ds.get("kind")
    need(kind in ("synthetic", "idx", "csv"), "dataset.kind", "must be one of synthetic, idx, csv")
    need(_is_int(ds.get("num_classes")) and ds.get("num_classes", 0) >= 2, "dataset.num_classes", "must be an integer >= 2")
    if kind == "synthetic":
        for key in ("per_class", "dim"):
            need(_is_int(ds.get(key)) and ds[key] >= 1, f"dataset.{key}", "must be a positive integer")
        need(_is_num(ds.get("spread")) and ds["spread"] >= 0, "dataset.spread", "must be a non-negative number")
        need(_is_int(ds.get("seed")) and ds["seed"] >= 0, "dataset.seed", "must be a non-negative integer")
        tf = ds.get("test_fraction")
        need(_is_num(tf) and 0 < tf < 1, "dataset.test_fraction", "must lie in (0, 1)")
    elif kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            need(isinstance(ds.get(key), str), f"dataset.{key}", "path required for idx datasets")
    elif kind == "csv":
        for key in ("train_csv", "test_csv"):
            need(isinstance(ds.get(key), str), f"dataset.{key}", "path required for csv datasets")
    for key in ("limit_train", "limit_test"):
        if key in ds:
            need(_is_int(ds[key]) and ds[key] >= 1, f"dataset.{key}", "must be a positive integer")

    arch = cfg["model"].get("architecture")
    arch_ok = isinstance(arch, list) and len(arch) >= 2 and all(_is_int(w) and w >= 1 for w in arch)
    need(arch_ok, "model.architecture", "must be a list of >= 2 positive integers")
    if arch_ok and kind == "synthetic" and _is_int(ds.get("dim")):
        need(arch[0] == ds["dim"], "model.architecture", f"input width {arch[0]} != dataset.dim {ds['dim']}")
    if arch_ok and _is_int(ds.get("num_classes")):
        need(arch[-1] == ds["num_classes"], "model.architecture",
             f"output width {arch[-1]} != dataset.num_classes {ds['num_classes']}")

    tr = cfg["train"]
    need(_is_int(tr.get("epochs")) and tr["epochs"] >= 1, "train.epochs", "must be an integer >= 1")
    need(_is_num(tr.get("learning_rate")) and tr["learning_rate"] > 0, "train.learning_rate", "must be positive")
    need(_is_int(tr.get("batch_size")) and tr["batch_size"] >= 1, "train.batch_size", "must be an integer >= 1")

    un = cfg["unlearn"]
    need(_is_int(un.get("T")) and un["T"] >= 1, "unlearn.T", "must be an integer >= 1")
    need(_is_num(un.get("learning_rate")) and un["learning_rate"] > 0, "unlearn.learning_rate", "must be positive")
    need(_is_int(un.get("batch_size")) and un["batch_size"] >= 1, "unlearn.batch_size", "must be an integer >= 1")
    if "oversample_to" in un:
        need(_is_int(un["oversample_to"]) and un["oversample_to"] >= 1, "unlearn.oversample_to", "must be a positive integer")

    ng = cfg["neg_grad"]
    if "learning_rate" in ng:
        need(_is_num(ng["learning_rate"]) and ng["learning_rate"] > 0, "neg_grad.learning_rate", "must be positive")
    need(_is_num(ng.get("forget_weight")) and ng["forget_weight"] >= 0, "neg_grad.forget_weight", "must be non-negative")

    task = cfg["task"]
    mode = task.get("mode")
    need(mode in ("random_fraction", "class_removal"), "task.mode", "must be random_fraction or class_removal")
    if mode == "random_fraction":
        fr = task.get("fraction")
        need(_is_num(fr) and 0 < fr < 1, "task.fraction", f"must lie in (0, 1), got {fr!r}")
        need("class_ids" not in task, "task.class_ids", "not allowed with random_fraction")
    elif mode == "class_removal":
        ids = task.get("class_ids")
        ok = isinstance(ids, list) and len(ids) > 0 and all(_is_int(c) for c in ids)
        need(ok, "task.class_ids", "must be a non-empty list of class indices")
        if ok and _is_int(ds.get("num_classes")):
            need(all(0 <= c < ds["num_classes"] for c in ids), "task.class_ids",
                 f"indices must lie in [0, {ds['num_classes']})")
            need(len(set(ids)) < ds["num_classes"], "task.class_ids", "cannot remove every class")
        need("fraction" not in task, "task.fraction", "not allowed with class_removal")

    run = cfg["run"]
    methods = run.get("methods")
    need(isinstance(methods, list) and len(methods) > 0, "methods", "must be a non-empty list")
    if isinstance(methods, list):
        bad = [m for m in methods if m not in METHODS]
        need(not bad, "methods", f"unknown methods {bad}; choose from {list(METHODS)}")
        need(len(set(map(str, methods))) == len(methods), "methods", "duplicates are not allowed")
    seeds = run.get("seeds")
    need(isinstance(seeds, list) and len(seeds) > 0 and all(_is_int(s) and s >= 0 for s in seeds),
         "seeds", "must be a non-empty list of non-negative integers")
    if isinstance(seeds, list):
        need(len(set(map(str, seeds))) == len(seeds), "seeds", "duplicates are not allowed")
    need(_is_int(run.get("relearn_epochs")) and run["relearn_epochs"] >= 0, "run.relearn_epochs", "must be an integer >= 0")
    if "relearn_learning_rate" in run:
        need(_is_num(run["relearn_learning_rate"]) and run["relearn_learning_rate"] > 0,
             "run.relearn_learning_rate", "must be positive")
    need(isinstance(run.get("output_dir"), str) and run["output_dir"] != "", "run.output_dir", "must be a path")
    need(isinstance(run.get("timing"), bool), "run.timing", "must be true or false")
    need(_is_int(run.get("workers")) and run["workers"] >= 1, "run.workers", "must be an integer >= 1")
    return diags


@dataclass
class ExperimentConfig:
    dataset: dict
    architecture: tuple[int, ...]
    train: dict
    unlearn: dict
    neg_grad: dict
    task: data_mod.SplitSpec
    methods: list[str]
    seeds: list[int]
    relearn_epochs: int
    relearn_learning_rate: float
    output_dir: str
    timing: bool = True
    workers: int = 1
    resolved: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "ExperimentConfig":
        diags = validate(raw)
        if diags:
            raise ConfigError("; ".join(diags))
        cfg = resolve(raw)
        task = cfg["task"]
        spec = data_mod.SplitSpec(
            task["mode"],
            fraction=task.get("fraction"),
            class_ids=tuple(task["class_ids"]) if "class_ids" in task else None,
        )
        run = cfg["run"]
        return cls(
            dataset=cfg["dataset"],
            architecture=tuple(cfg["model"]["architecture"]),
            train=cfg["train"],
            unlearn=cfg["unlearn"],
            neg_grad=cfg["neg_grad"],
            task=spec,
            methods=list(run["methods"]),
            seeds=list(run["seeds"]),
            relearn_epochs=run["relearn_epochs"],
            relearn_learning_rate=run.get("relearn_learning_rate", cfg["unlearn"]["learning_rate"]),
            output_dir=run["output_dir"],
            timing=run["timing"],
            workers=run["workers"],
            resolved=cfg,
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    schema_version: int
    started: str
    finished: str
    files: dict[str, str]  # relative path -> sha256
    reports: list[str]


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_datasets(ds: Mapping) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    """Return (train, test) for the dataset section of a resolved config."""
    try:
        kind = ds["kind"]
        if kind == "synthetic":
            full = data_mod.synth_blobs(ds["num_classes"], ds["per_class"], ds["dim"], ds["spread"], ds["seed"])
            train_set, test_set = data_mod.holdout(full, ds["test_fraction"], ds["seed"])
        elif kind == "idx":
            train_set = data_mod.load_idx(ds["train_images"], ds["train_labels"], ds["num_classes"])
            test_set = data_mod.load_idx(ds["test_images"], ds["test_labels"], ds["num_classes"])
        else:
            train_set = data_mod.load_csv(ds["train_csv"], ds["num_classes"])
            test_set = data_mod.load_csv(ds["test_csv"], ds["num_classes"])
    except (OSError, ValueError) as exc:
        raise DataLoadError(str(exc)) from exc
    if "limit_train" in ds:
        train_set = train_set.subset(range(min(ds["limit_train"], len(train_set))))
    if "limit_test" in ds:
        test_set = test_set.subset(range(min(ds["limit_test"], len(test_set))))
    if len(train_set) == 0 or len(test_set) == 0:
        raise DataLoadError("training or test data is empty")
    if train_set.dim != test_set.dim:
        raise DataLoadError(f"train width {train_set.dim} != test width {test_set.dim}")
    return train_set, test_set


def run_seed(config: ExperimentConfig, seed: int) -> tuple[list[MetricsReport], list[tuple]]:
    """Everything for one seed: g_o, splits, S, each method, evaluation, relearn."""
    train_set, test_set = load_datasets(config.dataset)
    if train_set.dim != config.architecture[0]:
        raise ConfigError(f"model.architecture: input width {config.architecture[0]} != data width {train_set.dim}")
    tcfg = TrainConfig(architecture=config.architecture, seed=seed, **config.train)
    un = dict(config.unlearn)
    oversample = un.pop("oversample_to", None)
    ucfg = UnlearnConfig(seed=seed, **un)

    g_o = train(train_set, tcfg)
    spec = data_mod.SplitSpec(config.task.mode, config.task.fraction, config.task.class_ids, seed)
    forget, remain = data_mod.split(train_set, spec)
    if len(forget) == 0 or len(remain) == 0:
        raise ConfigError("task: split leaves the forgetting or remaining data empty")
    splits = Splits(forget, remain, test_set, spec.class_ids or ())
    S = data_mod.prepare_joint(forget, remain, seed, oversample)

    ng_cfg = UnlearnConfig(**{**asdict(ucfg), "learning_rate": config.neg_grad.get("learning_rate", ucfg.learning_rate)})
    runners = {
        "retrain": lambda: timed_retrain(remain, tcfg),
        "finetune": lambda: finetune(g_o, remain, ucfg),
        "neg_grad": lambda: neg_grad(g_o, forget, remain, ng_cfg, config.neg_grad["forget_weight"]),
        "camu": lambda: camu(g_o, S, ucfg),
        "camu_ablation_no_counterfactual": lambda: camu(
            g_o, S, UnlearnConfig(**{**asdict(ucfg), "use_counterfactual": False})
        ),
        "camu_ablation_no_repr_alignment": lambda: camu(
            g_o, S, UnlearnConfig(**{**asdict(ucfg), "use_repr_alignment": False})
        ),
    }
    relearn_cfg = UnlearnConfig(T=1, learning_rate=config.relearn_learning_rate, batch_size=ucfg.batch_size, seed=seed)
    reports, relearn_rows = [], []
    for method in config.methods:
        log.info("seed %d: %s", seed, method)
        try:
            result = runners[method]()
        except DivergenceError as exc:
            raise DivergenceError(method) from exc
        wall = result.wall_time_seconds if config.timing else None
        reports.append(evaluate(method, result.model, splits, spec.task, seed, wall))
        if config.relearn_epochs:
            try:
                curve = relearn_curve(result.model, splits, config.relearn_epochs, relearn_cfg, spec.task)
            except DivergenceError as exc:
                raise DivergenceError(f"{method} (relearn)") from exc
            relearn_rows.extend((method, spec.task, seed, i, g) for i, g in enumerate(curve.gaps))
    return reports, relearn_rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _report_row(r: MetricsReport) -> list:
    return [getattr(r, c) for c in CSV_COLUMNS]


def render_summary(averaged: list[MetricsReport]) -> str:
    """Two-decimal table of seed-averaged metrics, one line per method."""
    cols = [c for c in METRIC_FIELDS if any(getattr(r, c) is not None for r in averaged)]
    header = f"{'method':34s}" + "".join(f"{c:>9s}" for c in cols) + f"{'time(s)':>10s}"
    lines = [header]
    for r in averaged:
        cells = "".join(f"{getattr(r, c):9.2f}" if getattr(r, c) is not None else f"{'':9s}" for c in cols)
        wall = f"{r.wall_time_seconds:10.3f}" if r.wall_time_seconds is not None else f"{'':10s}"
        lines.append(f"{r.method:34s}{cells}{wall}")
    return "\n".join(lines) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config: ExperimentConfig, summary: bool = False) -> RunManifest:
    started = datetime.now(timezone.utc).isoformat()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        results = [run_seed(config, seed) for seed in config.seeds]

    reports = [r for seed_reports, _ in results for r in seed_reports]
    relearn_rows = [row for _, rows in results for row in rows]
    averaged = [average_reports([r for r in reports if r.method == m]) for m in config.methods]

    files = {"reports.csv": out / "reports.csv", "averaged.csv": out / "averaged.csv"}
    _write_csv(files["reports.csv"], CSV_COLUMNS, [_report_row(r) for r in reports])
    _write_csv(files["averaged.csv"], CSV_COLUMNS, [_report_row(r) for r in averaged])
    if relearn_rows:
        files["relearn.csv"] = out / "relearn.csv"
        _write_csv(files["relearn.csv"], RELEARN_COLUMNS, relearn_rows)
    if summary:
        files["summary.txt"] = out / "summary.txt"
        text = render_summary(averaged)
        files["summary.txt"].write_text(text)
        print(text, end="")

    manifest = RunManifest(
        config_hash=config.config_hash(),
        tool_version=__version__,
        schema_version=CSV_SCHEMA_VERSION,
        started=started,
        finished=datetime.now(timezone.utc).isoformat(),
        files={name: _sha256(path) for name, path in files.items()},
        reports=[str(files["reports.csv"]), str(files["averaged.csv"])],
    )
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camu-lab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True, help="TOML experiment file")
    p_run.add_argument("--seed", type=int, action="append", dest="seeds", help="override seeds (repeatable)")
    p_run.add_argument("--out", help="override run.output_dir")
    p_run.add_argument("--summary", action="store_true", help="also print and save a 2-decimal summary table")
    p_run.add_argument("--workers", type=int, help="override run.workers")
    p_run.add_argument("--no-timing", action="store_true", help="leave wall_time_seconds blank")
    p_run.add_argument("-v", "--verbose", action="store_true")
    p_val = sub.add_parser("validate", help="check a config and list problems")
    p_val.add_argument("--config", required=True)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        raw = load_config(args.config)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tomllib.TOMLDecodeError as exc:
        print(f"error: config is not valid TOML: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        diags = validate(raw)
        for d in diags:
            print(d)
        return EXIT_CONFIG if diags else EXIT_OK

    run_section = dict(raw.get("run", {})) if isinstance(raw.get("run", {}), Mapping) else raw.get("run")
    if isinstance(run_section, dict):
        if args.seeds:
            run_section["seeds"] = args.seeds
        if args.out:
            run_section["output_dir"] = args.out
        if args.workers is not None:
            run_section["workers"] = args.workers
        if args.no_timing:
            run_section["timing"] = False
        raw = {**raw, "run": run_section}

    diags = validate(raw)
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    config = ExperimentConfig.from_mapping(raw)
    try:
        start = time.perf_counter()
        manifest = run(config, summary=args.summary)
    except DataLoadError as exc:
        print(f"error: data load failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: numeric divergence in method {exc.method}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("finished in %.1fs; manifest hash %s", time.perf_counter() - start, manifest.config_hash)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
