"""Experiment harness: sweeps over (method, sparsity, seed), trade-off and
efficiency measurements, and machine-readable result files.

A sweep cell is a pure function of its configuration and the dataset bytes:
model init, batching, and every update draw from seeded generators, so
re-running a cell reproduces each metric bitwise (wall time excepted).
Records stream to an optional JSON-lines sink as cells finish, which makes a
crashed sweep resumable by inspection; the returned list is always in grid
order.

Method names accept ablation suffixes: "bifp-uns:no-m" drops the fairness
term from the mask updates, ":no-w" from the weight updates, and ":no-wm"
from both.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datamod
from . import fairness, pruners
from .nn import MaskedModel

THREADS_ENV = "BIFP_THREADS"

# kept-fraction halves per rung: 1 - 0.8^r for r = 1..7
LTH_LADDER = tuple(round(1.0 - 0.8**r, 6) for r in range(1, 8))

DEFAULT_HIDDEN = (64, 32)
DEFAULT_RATIOS = (0.5, 0.25, 0.25)

RECORD_FIELDS = (
    "method",
    "sparsity",
    "seed",
    "acc_overall",
    "acc_pos",
    "acc_neg",
    "perf_gap",
    "degradation_gap",
    "total_iterations",
    "wall_time_seconds",
    "error",
)

FLOAT_FIELDS = (
    "sparsity",
    "acc_overall",
    "acc_pos",
    "acc_neg",
    "perf_gap",
    "degradation_gap",
    "wall_time_seconds",
)


class HarnessError(ValueError):
    pass


@dataclass
class RunRecord:
    method: str
    sparsity: float
    seed: int
    acc_overall: float = float("nan")
    acc_pos: float = float("nan")
    acc_neg: float = float("nan")
    perf_gap: float = float("nan")
    degradation_gap: float = float("nan")
    total_iterations: int = 0
    wall_time_seconds: float = 0.0
    error: str = ""


@dataclass
class SweepSpec:
    """Grid definition: methods x sparsities x seeds over one dataset."""

    methods: list
    sparsities: list = field(default_factory=lambda: list(LTH_LADDER))
    seeds: list = field(default_factory=lambda: [0])
    dataset: object = field(default_factory=datamod.SyntheticSpec)
    overrides: dict = field(default_factory=dict)  # per-method PruneConfig fields
    hidden_sizes: tuple = DEFAULT_HIDDEN
    ratios: tuple = DEFAULT_RATIOS
    split_seed: int = 0

    def validate(self) -> None:
        if not self.methods or not self.sparsities or not self.seeds:
            raise HarnessError("methods, sparsities, and seeds must be non-empty")
        sp = list(self.sparsities)
        if any(not 0.0 <= s < 1.0 for s in sp):
            raise HarnessError(f"sparsities must lie in [0, 1), got {sp}")
        if sorted(sp) != sp or len(set(sp)) != len(sp):
            raise HarnessError(f"sparsities must be strictly increasing, got {sp}")
        for m in self.methods:
            parse_method(m)


def parse_method(name: str):
    """Split an ablation-suffixed method name into (base, mask_on, weight_on)."""
    base, _, suffix = name.partition(":")
    if base not in pruners.METHODS:
        raise HarnessError(f"unknown method {base!r} (choose from {pruners.METHODS})")
    if suffix == "":
        return base, True, True
    if suffix == "no-m":
        return base, False, True
    if suffix == "no-w":
        return base, True, False
    if suffix == "no-wm":
        return base, False, False
    raise HarnessError(f"unknown ablation suffix {suffix!r} in {name!r}")


def build_config(method: str, sparsity: float, seed: int, overrides=None) -> pruners.PruneConfig:
    base, mask_on, weight_on = parse_method(method)
    cfg = pruners.PruneConfig(
        method=base,
        target_sparsity=float(sparsity),
        seed=int(seed),
        fair_mask_on=mask_on,
        fair_weight_on=weight_on,
    )
    if overrides:
        overrides = dict(overrides)
        if isinstance(overrides.get("surrogate"), dict):
            overrides["surrogate"] = fairness.SurrogateSpec(**overrides["surrogate"])
        fields = {f for f in cfg.__dataclass_fields__}
        unknown = set(overrides) - fields
        if unknown:
            raise HarnessError(f"unknown PruneConfig overrides {sorted(unknown)}")
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def load_dataset(source) -> datamod.GroupedDataset:
    """Materialize a dataset source: SyntheticSpec or (path, CsvSchema)."""
    if isinstance(source, datamod.SyntheticSpec):
        return datamod.generate_synthetic(source)
    if isinstance(source, datamod.GroupedDataset):
        return source
    if isinstance(source, tuple) and len(source) == 2:
        return datamod.load_csv(source[0], source[1])
    raise HarnessError(f"cannot load dataset from {type(source).__name__}")


def _init_model(hidden_sizes, d, cfg) -> MaskedModel:
    return MaskedModel.init([d, *hidden_sizes, 1], mode=cfg.mask_mode(), seed=cfg.seed)


def run_cell(method, sparsity, seed, splits, hidden_sizes=DEFAULT_HIDDEN, overrides=None,
             dense=None):
    """Execute one grid cell and measure it on the test split."""
    cfg = build_config(method, sparsity, seed, overrides)
    record = RunRecord(method=method, sparsity=float(sparsity), seed=int(seed))
    start = time.perf_counter()
    try:
        model = _init_model(hidden_sizes, splits.train.d, cfg)
        model, log = pruners.prune(model, splits, cfg)
        acc_pos, acc_neg = fairness.group_accuracies(model, splits.test)
        record.acc_overall = fairness.accuracy(model, splits.test)
        record.acc_pos = acc_pos
        record.acc_neg = acc_neg
        record.perf_gap = abs(acc_pos - acc_neg)
        record.total_iterations = log.total_iterations
        if dense is not None:
            report = fairness.degradation_fairness(dense, model, splits.test)
            record.degradation_gap = report.degradation_gap
    except (pruners.TrialDivergedError, pruners.PruneConfigError, datamod.DataError,
            fairness.FairnessError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
    record.wall_time_seconds = time.perf_counter() - start
    return record


def dense_reference(seed, splits, hidden_sizes=DEFAULT_HIDDEN, overrides=None) -> MaskedModel:
    """Plain dense model for degradation metrics: lottery at sparsity zero."""
    cfg = build_config("lottery", 0.0, seed, overrides)
    cfg = replace(cfg, finetune_epochs=max(cfg.finetune_epochs, cfg.train_epochs))
    model = _init_model(hidden_sizes, splits.train.d, cfg)
    model, _ = pruners.prune(model, splits, cfg)
    return model


def _worker_count(n_cells: int) -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        limit = max(1, int(raw))
    except ValueError:
        raise HarnessError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return min(limit, n_cells)


def run_sweep(spec: SweepSpec, sink_path=None):
    """Run the full grid; returns one RunRecord per cell, in grid order.

    Cells run independently (``BIFP_THREADS`` caps the worker pool) and a
    failed cell only fills its record's error field. When ``sink_path`` is
    given, finished records append immediately as JSON lines.
    """
    spec.validate()
    dataset = load_dataset(spec.dataset)
    splits = datamod.split(dataset, spec.ratios, seed=spec.split_seed)

    dense_by_seed = {}
    for seed in dict.fromkeys(spec.seeds):
        overrides = _shared_overrides(spec)
        dense_by_seed[seed] = dense_reference(seed, splits, spec.hidden_sizes, overrides)

    cells = [
        (method, sparsity, seed)
        for method in spec.methods
        for sparsity in spec.sparsities
        for seed in spec.seeds
    ]

    sink_lock = threading.Lock()
    sink = open(sink_path, "a", encoding="utf-8") if sink_path else None

    def execute(cell):
        method, sparsity, seed = cell
        record = run_cell(
            method, sparsity, seed, splits, spec.hidden_sizes,
            overrides=spec.overrides.get(method), dense=dense_by_seed[seed],
        )
        if sink is not None:
            line = json.dumps(_record_doc(record))
            with sink_lock:
                sink.write(line + "\n")
                sink.flush()
        return record

    try:
        workers = _worker_count(len(cells))
        if workers == 1:
            records = [execute(cell) for cell in cells]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(execute, cells))
    finally:
        if sink is not None:
            sink.close()
    return records


def _shared_overrides(spec: SweepSpec):
    """Overrides applied to every method, used for the dense reference."""
    return spec.overrides.get("*")


def tradeoff_curve(method, sparsity, lambda_grid, splits, seed,
                   hidden_sizes=DEFAULT_HIDDEN, overrides=None):
    """(lambda, test accuracy, test gap) at fixed sparsity across penalties."""
    if not lambda_grid:
        raise HarnessError("lambda grid must be non-empty")
    base, _, _ = parse_method(method)
    if base in ("lottery", "snip", "fpgm"):
        raise HarnessError(f"method {method!r} has no fairness penalty to sweep")
    points = []
    for lam in lambda_grid:
        merged = dict(overrides or {})
        merged["lambda_fair"] = float(lam)
        cfg = build_config(method, sparsity, seed, merged)
        model = _init_model(hidden_sizes, splits.train.d, cfg)
        model, _ = pruners.prune(model, splits, cfg)
        acc = fairness.accuracy(model, splits.test)
        gap = fairness.performance_fairness(model, splits.test)
        points.append((float(lam), acc, gap))
    return points


def iterations_to_target(method, splits, targets, cfg, hidden_sizes=DEFAULT_HIDDEN):
    """First logged step where validation acc >= min_acc and gap <= max_gap.

    Validation is sampled every cfg.validate_every steps during training, so
    the answer is quantized to that cadence. Returns None when the run's
    budget ends without reaching both targets.
    """
    min_acc, max_gap = targets
    cfg = replace(cfg, method=parse_method(method)[0])
    model = _init_model(hidden_sizes, splits.train.d, cfg)
    _, log = pruners.prune(model, splits, cfg)
    for rec in log.val_records:
        if rec.acc >= min_acc and rec.gap <= max_gap:
            return rec.step
    return None


# ---------------------------------------------------------------------------
# result files
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    return f"{value:.9g}"


def _record_doc(record: RunRecord) -> dict:
    doc = {}
    for name in RECORD_FIELDS:
        value = getattr(record, name)
        doc[name] = float(_fmt(value)) if name in FLOAT_FIELDS else value
    return doc


def emit(records, path, format: str = "csv") -> None:
    """Write records with a stable column order and 9-significant-digit floats."""
    if format not in ("csv", "json-lines", "jsonl"):
        raise HarnessError(f"unknown format {format!r}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if format == "csv":
                writer = csv.writer(fh)
                writer.writerow(RECORD_FIELDS)
                for record in records:
                    writer.writerow(
                        [
                            _fmt(getattr(record, name))
                            if name in FLOAT_FIELDS
                            else getattr(record, name)
                            for name in RECORD_FIELDS
                        ]
                    )
            else:
                for record in records:
                    fh.write(json.dumps(_record_doc(record)) + "\n")
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc


def load_records(path, format: str = "csv"):
    """Parse a file written by emit back into RunRecords."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            rows = list(reader)
        else:
            rows = [json.loads(line) for line in fh if line.strip()]
    for row in rows:
        records.append(
            RunRecord(
                method=row["method"],
                sparsity=float(row["sparsity"]),
                seed=int(row["seed"]),
                acc_overall=float(row["acc_overall"]),
                acc_pos=float(row["acc_pos"]),
                acc_neg=float(row["acc_neg"]),
                perf_gap=float(row["perf_gap"]),
                degradation_gap=float(row["degradation_gap"]),
                total_iterations=int(row["total_iterations"]),
                wall_time_seconds=float(row["wall_time_seconds"]),
                error=row.get("error", "") or "",
            )
        )
    return records
