"""Config parsing, the six-configuration sweep, and report serialization.

Run configs are strict-schema JSON; unknown keys are errors that name the
offending key path. Each run writes ``<out>/<name>/metrics.csv`` (one row
per epoch) and ``<out>/<name>/run_meta.json`` (resolved config, split
definition, real wall-clock timings); the sweep writes ``<out>/report.csv``
with one row per run. The CSV wall_seconds columns are reserved and always
written as 0.0 so that reruns with the same seed produce byte-identical
CSVs; true timings live in run_meta.json.
"""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .data import ManifestDatasets, SyntheticSpec, generate_synthetic, scan_dataset, split
from .model import ModelConfig, build_model
from .training import TrainConfig, fit

REPORT_COLUMNS = ("name", "training_loss", "training_accuracy",
                  "testing_loss", "testing_accuracy", "seed", "epochs", "wall_seconds")
METRICS_COLUMNS = ("epoch", "train_loss", "train_accuracy", "test_loss",
                   "test_accuracy", "lambda", "mmd_value", "wall_seconds")
COMPARE_COLUMNS = ("name", "training_loss", "training_accuracy",
                   "testing_loss", "testing_accuracy")

METRICS_SEMANTICS = ("training metrics: source-domain train split (eval mode); "
                     "testing metrics: held-out target-domain split")

REFERENCE_RESOURCE = "table1_reference.csv"


class ConfigError(ValueError):
    """A run configuration file violates the schema."""


@dataclass(frozen=True)
class DataSource:
    """Where a run's images come from: a generator spec or a dataset tree."""

    kind: str  # "synthetic" | "tree"
    synthetic: SyntheticSpec | None = None
    root: str | None = None
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.kind not in ("synthetic", "tree"):
            raise ConfigError(f"data kind must be 'synthetic' or 'tree', got {self.kind!r}")
        if self.kind == "synthetic" and self.synthetic is None:
            raise ConfigError("synthetic data source needs a generator spec")
        if self.kind == "tree" and not self.root:
            raise ConfigError("tree data source needs a root path")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def default_side(self):
        return self.synthetic.image_side if self.kind == "synthetic" else 224


@dataclass(frozen=True)
class RunSpec:
    """One named experiment: model + training hyperparameters + data."""

    name: str
    model: ModelConfig
    train: TrainConfig
    data: DataSource


_MODEL_KEYS = {"conv_filters", "feature_units", "dropout_rate", "num_classes",
               "head_max_norm", "image_side", "deep_head"}
_TRAIN_KEYS = {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "epochs",
               "seed", "adapt_on", "lambda_max", "gamma", "max_norm_cap", "estimator",
               "kernel_bandwidths", "kernel_multipliers", "dtype"}
_SYNTHETIC_KEYS = {"samples_per_class", "image_side", "seed", "texture_amplitude",
                   "blob_intensity", "blob_radius_range", "noise_source", "noise_target",
                   "brightness_offset", "invert_target"}
_DATA_KEYS = {"synthetic", "root", "train_fraction"}
_RUN_KEYS = {"name", "model", "train", "data"}


def _require_mapping(obj, path):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must be an object")
    return obj


def _check_keys(obj, allowed, path):
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")


def _build(cls, kwargs, path, exc_types=(ValueError, TypeError)):
    converted = {k: tuple(v) if isinstance(v, list) else v for k, v in kwargs.items()}
    try:
        return cls(**converted)
    except exc_types as exc:
        raise ConfigError(f"invalid value under {path}: {exc}") from exc


def parse_synthetic_spec(obj, path="synthetic"):
    obj = _require_mapping(obj, path)
    _check_keys(obj, _SYNTHETIC_KEYS, path)
    return _build(SyntheticSpec, obj, path)


def _parse_run(obj, index):
    path = f"runs[{index}]"
    obj = _require_mapping(obj, path)
    _check_keys(obj, _RUN_KEYS, path)
    for required in ("name", "model", "data"):
        if required not in obj:
            raise ConfigError(f"{path}.{required} is required")
    name = obj["name"]
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{path}.name must be a non-empty string")

    model_obj = _require_mapping(obj["model"], f"{path}.model")
    _check_keys(model_obj, _MODEL_KEYS, f"{path}.model")
    if "conv_filters" not in model_obj:
        raise ConfigError(f"{path}.model.conv_filters is required")

    train_obj = _require_mapping(obj.get("train", {}), f"{path}.train")
    _check_keys(train_obj, _TRAIN_KEYS, f"{path}.train")

    data_obj = _require_mapping(obj["data"], f"{path}.data")
    _check_keys(data_obj, _DATA_KEYS, f"{path}.data")
    if ("synthetic" in data_obj) == ("root" in data_obj):
        raise ConfigError(f"{path}.data needs exactly one of 'synthetic' or 'root'")
    if "synthetic" in data_obj:
        synthetic = parse_synthetic_spec(data_obj["synthetic"], f"{path}.data.synthetic")
        data = _build(DataSource, {
            "kind": "synthetic", "synthetic": synthetic,
            "train_fraction": data_obj.get("train_fraction", 0.8)}, f"{path}.data",
            exc_types=(ValueError, TypeError, ConfigError))
    else:
        data = _build(DataSource, {
            "kind": "tree", "root": str(data_obj["root"]),
            "train_fraction": data_obj.get("train_fraction", 0.8)}, f"{path}.data",
            exc_types=(ValueError, TypeError, ConfigError))

    if "image_side" not in model_obj:
        model_obj = dict(model_obj, image_side=data.default_side())
    model = _build(ModelConfig, model_obj, f"{path}.model")
    train = _build(TrainConfig, train_obj, f"{path}.train")
    return RunSpec(name=name, model=model, train=train, data=data)


def parse_config(path):
    """Strictly validated list of RunSpecs from a JSON document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    doc = _require_mapping(doc, "document")
    _check_keys(doc, {"runs"}, "document")
    runs = doc.get("runs")
    if not isinstance(runs, list) or not runs:
        raise ConfigError("document.runs must be a non-empty list")
    specs = [_parse_run(obj, i) for i, obj in enumerate(runs)]
    names = [s.name for s in specs]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ConfigError(f"duplicate run names: {sorted(dupes)}")
    return specs


SWEEP_ROWS = (
    ("fitting", (16, 32), "off"),
    ("mdd_1layer_16", (16,), "features"),
    ("mdd_2layer_16_32", (16, 32), "features"),
    ("mdd_3layer_16_32_64", (16, 32, 64), "features"),
    ("mdd_2layer_4_8", (4, 8), "features"),
    ("mdd_2layer_8_16", (8, 16), "features"),
)


def builtin_table1_sweep(data=None, seed=0, epochs=30, image_side=None, dtype="float32"):
    """The six standard configurations: supervised baseline + five adapted stacks.

    Defaults to the synthetic two-domain benchmark; single precision keeps
    the desk-scale sweep fast (float64 runs are a config-file switch away).
    """
    if data is None:
        data = DataSource(kind="synthetic", synthetic=SyntheticSpec(seed=seed))
    side = image_side if image_side is not None else data.default_side()
    specs = []
    for name, filters, adapt_on in SWEEP_ROWS:
        specs.append(RunSpec(
            name=name,
            model=ModelConfig(conv_filters=filters, image_side=side),
            train=TrainConfig(seed=seed, epochs=epochs, adapt_on=adapt_on, dtype=dtype),
            data=data,
        ))
    return specs


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row[c]) for c in columns])


def stage_data(specs, out_dir):
    """Materialize synthetic datasets; returns {spec index: dataset root}."""
    out_dir = Path(out_dir)
    staged = {}
    roots = {}
    for i, spec in enumerate(specs):
        if spec.data.kind == "tree":
            roots[i] = Path(spec.data.root)
            continue
        key = spec.data.synthetic
        if key not in staged:
            target = out_dir / "_data" / f"synthetic_{len(staged)}"
            generate_synthetic(key, target)
            staged[key] = target
        roots[i] = staged[key]
    return roots


def _execute_run(spec, data_root, run_dir):
    """Fit one spec and write its metrics.csv / run_meta.json."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    manifests = scan_dataset(data_root)
    fraction = spec.data.train_fraction
    src_train, src_test = split(manifests["source"], fraction, spec.train.seed)
    tgt_train, tgt_test = split(manifests["target"], fraction, spec.train.seed)
    datasets = ManifestDatasets(src_train, tgt_train, tgt_test,
                                side=spec.model.image_side, dtype=spec.train.dtype)
    model = build_model(spec.model, seed=spec.train.seed, dtype=spec.train.dtype)
    records = fit(model, datasets, spec.train)
    wall = time.perf_counter() - started

    _write_csv(run_dir / "metrics.csv", METRICS_COLUMNS, [
        {"epoch": r.epoch, "train_loss": r.train_loss, "train_accuracy": r.train_accuracy,
         "test_loss": r.test_loss, "test_accuracy": r.test_accuracy, "lambda": r.lambda_,
         "mmd_value": r.mmd_value, "wall_seconds": 0.0}
        for r in records])

    meta = {
        "name": spec.name,
        "model": asdict(spec.model),
        "train": asdict(spec.train),
        "data": {
            "kind": spec.data.kind,
            "root": str(data_root),
            "synthetic": None if spec.data.synthetic is None else asdict(spec.data.synthetic),
            "train_fraction": fraction,
        },
        "split": {
            "seed": spec.train.seed,
            "stratified": True,
            "source_train": len(src_train), "source_test_unused": len(src_test),
            "target_train": len(tgt_train), "target_test": len(tgt_test),
        },
        "metrics_semantics": METRICS_SEMANTICS,
        "wall_seconds": wall,
        "per_epoch_wall_seconds": [r.wall_seconds for r in records],
    }
    (run_dir / "run_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    final = records[-1]
    return {
        "name": spec.name,
        "training_loss": final.train_loss, "training_accuracy": final.train_accuracy,
        "testing_loss": final.test_loss, "testing_accuracy": final.test_accuracy,
        "seed": spec.train.seed, "epochs": spec.train.epochs, "wall_seconds": 0.0,
    }


def _execute_run_guarded(args):
    spec, data_root, run_dir = args
    try:
        return spec.name, _execute_run(spec, data_root, run_dir), None
    except Exception as exc:  # noqa: BLE001 - a failed run must not sink the sweep
        return spec.name, None, f"{type(exc).__name__}: {exc}"


@dataclass
class SweepReport:
    """Per-run final metrics in spec order, plus failure annotations."""

    rows: list
    errors: dict

    @property
    def ok(self):
        if self.errors:
            return False
        metric_keys = ("training_loss", "training_accuracy", "testing_loss", "testing_accuracy")
        return all(np.isfinite([row[k] for k in metric_keys]).all() for row in self.rows)


def run(specs, out_dir, parallel=1):
    """Execute every spec; returns the SweepReport after writing report.csv."""
    if not specs:
        raise ValueError("no run specs given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roots = stage_data(specs, out_dir)
    jobs = [(spec, roots[i], out_dir / spec.name) for i, spec in enumerate(specs)]

    results = {}
    errors = {}
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for name, row, error in pool.map(_execute_run_guarded, jobs):
                if error is None:
                    results[name] = row
                else:
                    errors[name] = error
    else:
        for job in jobs:
            name, row, error = _execute_run_guarded(job)
            if error is None:
                results[name] = row
            else:
                errors[name] = error

    rows = [results[s.name] for s in specs if s.name in results]
    report = SweepReport(rows=rows, errors=errors)

    if errors:  # flag the partial report with a trailing status column
        columns = REPORT_COLUMNS + ("status",)
        out_rows = []
        for s in specs:
            if s.name in results:
                out_rows.append(dict(results[s.name], status="ok"))
            else:
                out_rows.append({**{c: "" for c in REPORT_COLUMNS},
                                 "name": s.name, "status": errors[s.name]})
        _write_csv(out_dir / "report.csv", columns, out_rows)
    else:
        _write_csv(out_dir / "report.csv", REPORT_COLUMNS, rows)
    return report


def default_reference_path():
    return resources.files("mmdcnn") / REFERENCE_RESOURCE


def _read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no data rows")
    missing = [c for c in COMPARE_COLUMNS if c not in rows[0]]
    if missing:
        raise ConfigError(f"{path} is missing report columns: {missing}")
    out = {}
    for row in rows:
        out[row["name"]] = {c: float(row[c]) for c in COMPARE_COLUMNS[1:]}
    return out


def compare_report(report_path, reference_path=None):
    """Per-config deltas against reference figures (display only, never gated).

    Also reports, inside each file, how every adapted configuration fares
    against the supervised 'fitting' baseline on testing accuracy, flagging
    report rows that fail to beat it.
    """
    if reference_path is None:
        reference_path = default_reference_path()
    report = _read_report(report_path)
    reference = _read_report(reference_path)

    deltas = {}
    for name in report:
        if name in reference:
            deltas[name] = {metric: report[name][metric] - reference[name][metric]
                            for metric in COMPARE_COLUMNS[1:]}

    def baseline_gaps(table):
        if "fitting" not in table:
            return {}
        base = table["fitting"]["testing_accuracy"]
        return {name: row["testing_accuracy"] - base
                for name, row in table.items() if name != "fitting"}

    report_gaps = baseline_gaps(report)
    return {
        "deltas": deltas,
        "reference_gaps": baseline_gaps(reference),
        "report_gaps": report_gaps,
        "flagged": sorted(n for n, gap in report_gaps.items() if gap <= 0),
    }


def format_comparison(result):
    """Human-readable text for compare_report output."""
    lines = []
    metrics = COMPARE_COLUMNS[1:]
    header = f"{'config':<22}" + "".join(f"{m:>20}" for m in metrics)
    lines.append("deltas (report - reference):")
    lines.append(header)
    for name, row in result["deltas"].items():
        lines.append(f"{name:<22}" + "".join(f"{row[m]:>+20.4f}" for m in metrics))
    lines.append("")
    lines.append("testing_accuracy gap over the fitting baseline:")
    for label, gaps in (("reference", result["reference_gaps"]),
                        ("report", result["report_gaps"])):
        for name, gap in gaps.items():
            lines.append(f"  {label:<10} {name:<22} {gap:+.4f}")
    for name in result["flagged"]:
        lines.append(f"  FLAG: {name} does not beat the fitting baseline")
    return "\n".join(lines)
