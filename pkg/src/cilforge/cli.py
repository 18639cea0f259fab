"""Command-line front end: single runs, ablation grids and hyper-parameter sweeps."""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import re
import sys
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import SynthSpec, generate_longtail, load_samples
from .losses import LossConfig
from .runner import RunConfig, RunReport, Seeds, ablation_grid, run_experiment

log = logging.getLogger(__name__)

SWEEP_KEYS = ("alpha", "lambda_d", "lambda_k")

CSV_SCHEMAS = """\
output files (UTF-8, comma separated, header row always present):
  spec.json            fully resolved configuration actually run
  report.json          single run: the run report; grid/sweep: {"cells": {label: report}}
  summary.csv          config,acc_mean,acc_std,fgt_mean,fgt_std       (one row per configuration)
  curves.csv           config,step,avg_acc,avg_fgt                    (mean over class orders)
  acc_matrix_<k>.csv   step,task_1,...,task_T   accuracy on task j after step i (blank above diagonal)
  grid.csv             alpha,lambda_d,lambda_k,acc_mean,acc_std,fgt_mean,fgt_std   (sweeps only)
  cells/<label>/       per-configuration report.json, curves.csv, acc_matrix_<k>.csv (grids and sweeps)
  FAILED               written, with the error, when any run fails; exit status is then nonzero
"""


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


# -- schema -------------------------------------------------------------------------------

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"

_SEEDS_SCHEMA = {f.name: _INT for f in fields(Seeds)}
_SYNTH_SCHEMA = {
    "num_classes": _INT,
    "feature_dim": _INT,
    "samples_per_head_class": _INT,
    "imbalance_ratio": _FLOAT,
    "cluster_spread": _FLOAT,
    "test_per_class": _INT,
    "seed": _INT,
}
_FILE_SCHEMA = {"train": _STR, "test": _STR}
_TRAIN_SCHEMA = {
    "epochs": _INT,
    "batch_size": _INT,
    "learning_rate": _FLOAT,
    "momentum": _FLOAT,
    "weight_decay": _FLOAT,
    "memory": _INT,
    "orders": _INT,
    "hidden": [_INT],
    "embedding_dim": _INT,
    "classification": _STR,
    "margin_loss": _STR,
    "use_kd": _BOOL,
    "seeds": _SEEDS_SCHEMA,
}
_LOSS_SCHEMA = {f.name: _FLOAT for f in fields(LossConfig)}
SCHEMA = {
    "scenario": _STR,
    "dataset": None,  # synthetic spec or {"train": path, "test": path}; checked separately
    "train": _TRAIN_SCHEMA,
    "loss": _LOSS_SCHEMA,
    "ablation": _BOOL,
    "sweep": {k: [_FLOAT] for k in SWEEP_KEYS},
    "out": _STR,
}


def _type_ok(value, kind) -> bool:
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _FLOAT:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def _validate(obj, schema, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(obj, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        for key, value in obj.items():
            sub = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError(f"{sub}: unknown key")
            if schema[key] is not None:
                _validate(value, schema[key], sub)
    elif isinstance(schema, list):
        if not isinstance(obj, list):
            raise ConfigError(f"{path}: expected a list")
        for i, v in enumerate(obj):
            _validate(v, schema[0], f"{path}[{i}]")
    elif not _type_ok(obj, schema):
        raise ConfigError(f"{path}: expected {schema}, got {type(obj).__name__} {obj!r}")


def _validate_dataset(obj) -> None:
    if obj is None:
        return
    if not isinstance(obj, dict):
        raise ConfigError("dataset: expected an object")
    schema = _FILE_SCHEMA if set(obj) & set(_FILE_SCHEMA) else _SYNTH_SCHEMA
    _validate(obj, schema, "dataset")
    if schema is _FILE_SCHEMA:
        for key in _FILE_SCHEMA:
            if key not in obj:
                raise ConfigError(f"dataset.{key}: missing required field")


# -- spec -----------------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """Fully resolved experiment: data, training config, grid/sweep layout and output dir."""

    dataset: SynthSpec | tuple[str, str]
    run: RunConfig
    ablation: bool = False
    sweep: dict[str, list[float]] = field(default_factory=dict)
    out: str = "results"

    def __post_init__(self):
        for key, values in self.sweep.items():
            if key not in SWEEP_KEYS:
                raise ConfigError(f"sweep.{key}: unknown key")
            if not values:
                raise ConfigError(f"sweep.{key}: axis must be non-empty")
        if self.ablation and self.sweep:
            raise ConfigError("ablation: cannot be combined with sweep")

    def to_dict(self) -> dict:
        r = self.run
        if isinstance(self.dataset, SynthSpec):
            data = {f.name: getattr(self.dataset, f.name) for f in fields(SynthSpec)}
        else:
            data = {"train": self.dataset[0], "test": self.dataset[1]}
        return {
            "scenario": f"{r.base}-{r.increment}",
            "dataset": data,
            "train": {
                "epochs": r.epochs,
                "batch_size": r.batch_size,
                "learning_rate": r.learning_rate,
                "momentum": r.momentum,
                "weight_decay": r.weight_decay,
                "memory": r.memory,
                "orders": r.num_orders,
                "hidden": list(r.hidden),
                "embedding_dim": r.embedding_dim,
                "classification": r.classification,
                "margin_loss": r.margin_loss,
                "use_kd": r.use_kd,
                "seeds": {f.name: getattr(r.seeds, f.name) for f in fields(Seeds)},
            },
            "loss": {f.name: getattr(r.loss, f.name) for f in fields(LossConfig)},
            "ablation": self.ablation,
            "sweep": {k: list(v) for k, v in self.sweep.items()},
            "out": self.out,
        }


def parse_scenario(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*-\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise ConfigError(f"scenario: expected 'B-I' with positive integers, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _set(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def parse_config(path=None, overrides: dict | None = None) -> ExperimentSpec:
    """Load a JSON config, apply dotted-path ``overrides`` on top and validate.

    Flags win over the file.  Errors name the key path, e.g. ``train.epochs``.
    """
    cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON ({e})") from None
    cfg = copy.deepcopy(cfg)
    _validate(cfg, SCHEMA, "")
    for key, value in (overrides or {}).items():
        _set(cfg, key, value)
    _validate(cfg, SCHEMA, "")
    _validate_dataset(cfg.get("dataset"))
    return _build(cfg)


def _build(cfg: dict) -> ExperimentSpec:
    if "scenario" not in cfg:
        raise ConfigError("scenario: missing required field")
    base, inc = parse_scenario(cfg["scenario"])
    data = cfg.get("dataset") or {}
    try:
        dataset = (data["train"], data["test"]) if "train" in data else SynthSpec(**data)
    except ValueError as e:
        raise ConfigError(f"dataset: {e}") from None
    train = dict(cfg.get("train", {}))
    kwargs = {k: v for k, v in train.items() if k not in ("orders", "seeds", "hidden")}
    if "orders" in train:
        kwargs["num_orders"] = train["orders"]
    if "hidden" in train:
        kwargs["hidden"] = tuple(train["hidden"])
    if "seeds" in train:
        kwargs["seeds"] = Seeds(**train["seeds"])
    try:
        loss = LossConfig(**cfg.get("loss", {}))
    except ValueError as e:
        raise ConfigError(f"loss: {e}") from None
    try:
        run = RunConfig(base, inc, loss=loss, **kwargs)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    return ExperimentSpec(dataset, run, cfg.get("ablation", False), dict(cfg.get("sweep", {})), cfg.get("out", "results"))


# -- execution ------------------------------------------------------------------------------


def load_dataset(spec: ExperimentSpec):
    if isinstance(spec.dataset, SynthSpec):
        return generate_longtail(spec.dataset)
    train, k = load_samples(spec.dataset[0])
    test, _ = load_samples(spec.dataset[1])
    counts = {c: int(n) for c, n in sorted(train.counts().items())}
    if len(counts) != k:
        raise ConfigError(f"dataset.train: {k} classes declared but {len(counts)} present")
    return train, test, counts


def sweep_cells(spec: ExperimentSpec) -> list[tuple[str, dict, RunConfig]]:
    """Cartesian product of the sweep axes, in axis order (alpha, lambda_d, lambda_k)."""
    if not spec.sweep:
        raise ConfigError("sweep: at least one non-empty axis required")
    keys = [k for k in SWEEP_KEYS if k in spec.sweep]
    cells = []
    for values in itertools.product(*(spec.sweep[k] for k in keys)):
        point = dict(zip(keys, values))
        loss = LossConfig(**{**spec.run.loss.__dict__, **point})
        label = ",".join(f"{k}={v!r}" for k, v in point.items())
        cells.append((label, point, replace(spec.run, loss=loss)))
    return cells


def _cells(spec: ExperimentSpec):
    if spec.sweep:
        return [(label, cfg) for label, _, cfg in sweep_cells(spec)]
    if spec.ablation:
        return ablation_grid(spec.run)
    return [("main", spec.run)]


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_files(out: Path, report: RunReport, label: str = "main") -> None:
    """Per-configuration artifacts: report.json, acc_matrix_<k>.csv, curves.csv."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    for k, mat in enumerate(report.matrices):
        t = len(mat)
        rows = [[i + 1] + [_fmt(a) for a in row] + [""] * (t - len(row)) for i, row in enumerate(mat)]
        _write_csv(out / f"acc_matrix_{k}.csv", ["step"] + [f"task_{j + 1}" for j in range(t)], rows)
    _write_csv(out / "curves.csv", ["config", "step", "avg_acc", "avg_fgt"], _curve_rows(label, report))


def _curve_rows(label, report):
    return [[label, s, _fmt(a), _fmt(f)] for s, a, f in report.curves()]


def _summary_row(label, r: RunReport):
    return [label, _fmt(r.acc_mean), _fmt(r.acc_std), _fmt(r.fgt_mean), _fmt(r.fgt_std)]


def _cell_dirname(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]", "_", label)


def run_command(spec: ExperimentSpec) -> int:
    """Run the experiment and write every artifact into ``spec.out``; returns the exit status."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    _write_json(out / "spec.json", spec.to_dict())
    try:
        dataset = load_dataset(spec)
        cells = _cells(spec)
        reports = []
        for label, cfg in cells:
            log.info("running %s", label)
            report = run_experiment(cfg, dataset)
            if len(cells) > 1:
                write_report_files(out / "cells" / _cell_dirname(label), report, label)
            reports.append((label, report))
    except Exception as e:
        (out / "FAILED").write_text(f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}", encoding="utf-8")
        log.error("run failed: %s", e)
        return 1
    # single writer merge of the per-cell results
    if len(reports) == 1:
        write_report_files(out, reports[0][1], reports[0][0])
    else:
        _write_json(out / "report.json", {"cells": {label: r.to_dict() for label, r in reports}})
        rows = [row for label, r in reports for row in _curve_rows(label, r)]
        _write_csv(out / "curves.csv", ["config", "step", "avg_acc", "avg_fgt"], rows)
    _write_csv(out / "summary.csv", ["config", "acc_mean", "acc_std", "fgt_mean", "fgt_std"],
               [_summary_row(label, r) for label, r in reports])
    if spec.sweep:
        _write_grid(out, spec, reports)
    return 0


def sweep_command(spec: ExperimentSpec) -> int:
    if not spec.sweep:
        raise ConfigError("sweep: at least one non-empty axis required")
    return run_command(spec)


def _write_grid(out: Path, spec: ExperimentSpec, reports) -> None:
    rows = []
    for (_, point, cfg), (_, r) in zip(sweep_cells(spec), reports):
        vals = [_fmt(getattr(cfg.loss, k)) for k in SWEEP_KEYS]
        rows.append(vals + [_fmt(r.acc_mean), _fmt(r.acc_std), _fmt(r.fgt_mean), _fmt(r.fgt_std)])
    _write_csv(out / "grid.csv", list(SWEEP_KEYS) + ["acc_mean", "acc_std", "fgt_mean", "fgt_std"], rows)


# -- argument parsing ----------------------------------------------------------------------


def _parse_sweep(items) -> dict[str, list[float]]:
    axes: dict[str, list[float]] = {}
    for item in items:
        key, sep, vals = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"sweep: expected KEY=V1,V2,..., got {item!r}")
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep.{key}: unknown key (choose from {', '.join(SWEEP_KEYS)})")
        try:
            values = [float(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"sweep.{key}: values must be numbers, got {vals!r}") from None
        if not values:
            raise ConfigError(f"sweep.{key}: axis must be non-empty")
        axes[key] = values
    return axes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cilforge",
        description="Class-incremental learning experiments on synthetic long-tailed data.",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override its values")
    p.add_argument("--scenario", metavar="B-I", help="base classes and classes per later step, e.g. 4-1")
    p.add_argument("--alpha", type=float, metavar="F", help="old-class weight of the balanced loss, in [0, 1]")
    p.add_argument("--lambda-d", type=float, metavar="F", help="weight of the margin loss")
    p.add_argument("--lambda-k", type=float, metavar="F", help="weight of the distillation loss")
    p.add_argument("--memory", type=int, metavar="INT", help="exemplars per class")
    p.add_argument("--orders", type=int, metavar="INT", help="number of random class orders")
    p.add_argument("--seed", type=int, metavar="INT",
                   help="master seed: dataset seed S, run streams data/order/init/noise/shuffle = S..S+4")
    p.add_argument("--out", metavar="DIR", help="output directory (default: results)")
    p.add_argument("--ablation", action="store_true", default=None, help="run the 4-row component grid")
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="sweep axis over alpha, lambda_d or lambda_k; repeat for a Cartesian grid")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    return p


def overrides_from_args(args) -> dict:
    o = {}
    simple = {
        "scenario": "scenario",
        "alpha": "loss.alpha",
        "lambda_d": "loss.lambda_d",
        "lambda_k": "loss.lambda_k",
        "memory": "train.memory",
        "orders": "train.orders",
        "out": "out",
        "ablation": "ablation",
    }
    for attr, key in simple.items():
        v = getattr(args, attr)
        if v is not None:
            o[key] = v
    if args.seed is not None:
        s = args.seed
        o["dataset.seed"] = s
        o["train.seeds"] = {f.name: s + i for i, f in enumerate(fields(Seeds))}
    if args.sweep:
        o["sweep"] = _parse_sweep(args.sweep)
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = overrides_from_args(args)
        if args.seed is not None and args.config:
            # the dataset seed only applies to synthetic data
            data = json.loads(Path(args.config).read_text(encoding="utf-8")).get("dataset") or {}
            if "train" in data:
                overrides.pop("dataset.seed")
        spec = parse_config(args.config, overrides)
    except (ValueError, OSError) as e:
        parser.error(str(e))
    return run_command(spec)


if __name__ == "__main__":
    sys.exit(main())
