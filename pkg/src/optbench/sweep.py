"""The experimental protocol: hyperparameter grids sampled without
replacement, fixed-epoch train/test sessions, and run records.

A run is fully determined by its config (dataset seed, init seed, and
per-epoch shuffle seeds all derive from it); only the wall-time columns
vary between repetitions. Runs that terminate early stay in the record
with their partial histories; nothing is discarded.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import optimizers as opt
from . import stats
from .objective import (
    BatchObjective,
    Dataset,
    DivergenceError,
    ModelSpec,
    evaluate,
    generate_synthetic_dataset,
    init_params,
    make_batch_plan,
    measure_accuracy,
)

RUNS_CSV_COLUMNS = (
    "run_id", "optimizer", "batch_size", "hyperparams_json", "status",
    "peak_accuracy", "peak_epoch", "ttpa_seconds", "total_seconds",
)
EPOCHS_CSV_COLUMNS = ("run_id", "epoch", "test_accuracy", "cum_seconds")

STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"
STATUS_ERROR = "error"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    train_count: int
    test_count: int
    classes: int
    seed: int

    def build(self) -> Dataset:
        return generate_synthetic_dataset(
            self.kind, self.train_count, self.classes, self.seed, test_count=self.test_count
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training session needs, and nothing shared."""

    optimizer: str
    batch_size: int
    hyperparameters: Mapping[str, object]
    seed: int
    model: ModelSpec
    dataset: DatasetSpec
    epochs: int = 100
    run_id: str = ""

    def validation_problems(self) -> list[str]:
        problems = opt.validate_hyperparameters(self.optimizer, dict(self.hyperparameters))
        if self.batch_size < 1:
            problems.append(f"batch size must be >= 1, got {self.batch_size}")
        elif self.dataset.train_count % self.batch_size != 0:
            problems.append(
                f"batch size {self.batch_size} does not divide training-set size {self.dataset.train_count}"
            )
        if self.epochs < 0:
            problems.append("epoch budget must be >= 0")
        return problems


@dataclass
class TrainingRun:
    """One training session's full record."""

    config: ExperimentConfig
    epoch_test_accuracy: list[float] = field(default_factory=list)
    epoch_wall_seconds: list[float] = field(default_factory=list)
    status: str = STATUS_COMPLETED
    total_seconds: float = 0.0

    @property
    def peak_accuracy(self) -> float:
        if not self.epoch_test_accuracy:
            return 0.0
        return float(max(self.epoch_test_accuracy))

    @property
    def peak_epoch(self) -> int:
        if not self.epoch_test_accuracy:
            return -1
        return int(np.argmax(self.epoch_test_accuracy))

    @property
    def ttpa_seconds(self) -> float:
        if not self.epoch_test_accuracy:
            return self.total_seconds
        return self.epoch_wall_seconds[self.peak_epoch]

    @property
    def optimizer(self) -> str:
        return self.config.optimizer

    @property
    def batch_size(self) -> int:
        return self.config.batch_size

    @property
    def run_id(self) -> str:
        return self.config.run_id


# ---------------------------------------------------------------------------
# grid expansion and sampling
# ---------------------------------------------------------------------------


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    """All assignments in the Cartesian product of the value sets, ordered
    lexicographically by declaration order of the names."""
    if not grid:
        raise ValueError("empty hyperparameter grid")
    names = list(grid)
    for name in names:
        if len(grid[name]) == 0:
            raise ValueError(f"empty value set for hyperparameter {name!r}")
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]


def sample_configs(assignments: Sequence, count: int, seed: int) -> list:
    """Uniform sample of ``count`` assignments without replacement."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count > len(assignments):
        raise ValueError(f"requested {count} samples from a pool of {len(assignments)}")
    order = np.random.default_rng(seed).permutation(len(assignments))[:count]
    return [assignments[i] for i in order]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _epoch_seeds(seed: int, epochs: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5BA7C4])).integers(
        0, 2**63 - 1, size=max(epochs, 1)
    )


def run_training(config: ExperimentConfig) -> TrainingRun:
    """Train one session: per epoch a fresh shuffle, one optimizer batch
    step per batch, then a full test-set accuracy measurement.

    Divergence (non-finite loss, gradient, or parameters) stops the run
    early with status "diverged" and keeps the partial record. Invalid
    configurations never start and come back with status "error".
    """
    run = TrainingRun(config=config)
    if config.validation_problems():
        run.status = STATUS_ERROR
        return run

    data = config.dataset.build()
    state = opt.make_state(config.optimizer, dict(config.hyperparameters))
    params = init_params(config.model, seed=config.seed)
    seeds = _epoch_seeds(config.seed, config.epochs)

    start = time.process_time()
    try:
        for epoch in range(config.epochs):
            plan = make_batch_plan(data.train_count, config.batch_size, seed=int(seeds[epoch]))
            for block in plan.batches:
                rows = data.train_indices[block]
                objective = BatchObjective(config.model, data, rows)
                if config.optimizer == "sgd":
                    ev = evaluate(config.model, params, data, rows)
                    params = opt.sgd_step(state, params, ev.gradient, is_first_step=state.momentum_buffer is None)
                elif config.optimizer == "fr":
                    params = opt.fr_batch_step(state, objective, params)
                else:
                    params = opt.lbfgs_batch_step(state, objective, params)
                if not np.isfinite(params).all():
                    raise DivergenceError("non-finite parameters")
            run.epoch_test_accuracy.append(
                measure_accuracy(config.model, params, data, data.test_indices)
            )
            run.epoch_wall_seconds.append(time.process_time() - start)
    except DivergenceError:
        run.status = STATUS_DIVERGED
    run.total_seconds = time.process_time() - start
    return run


def execute_configs(configs: Sequence[ExperimentConfig], parallelism: int = 1) -> list[TrainingRun]:
    """Run every config, in config order, optionally across worker
    processes. Results always come back in the input order."""
    if parallelism <= 1 or len(configs) <= 1:
        return [run_training(c) for c in configs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run_training, configs))


def runs_to_observations(runs: Iterable[TrainingRun]) -> stats.ObservationTable:
    """One observation row per run: (batch-size level, optimizer level,
    peak accuracy). Duplicates map to duplicate rows."""
    runs = list(runs)
    return stats.ObservationTable(
        factor_a=tuple(r.batch_size for r in runs),
        factor_b=tuple(r.optimizer for r in runs),
        response=tuple(r.peak_accuracy for r in runs),
    )


# ---------------------------------------------------------------------------
# CSV output (atomic, appendable)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """A runs.csv row; the analysis side of a TrainingRun."""

    run_id: str
    optimizer: str
    batch_size: int
    hyperparameters: dict
    status: str
    peak_accuracy: float
    peak_epoch: int
    ttpa_seconds: float
    total_seconds: float


def run_to_record(run: TrainingRun) -> RunRecord:
    return RunRecord(
        run_id=run.run_id,
        optimizer=run.optimizer,
        batch_size=run.batch_size,
        hyperparameters=dict(run.config.hyperparameters),
        status=run.status,
        peak_accuracy=run.peak_accuracy,
        peak_epoch=run.peak_epoch,
        ttpa_seconds=run.ttpa_seconds,
        total_seconds=run.total_seconds,
    )


def _atomic_write(path: Path, rows: list[list], header: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_runs_csv(path: str | Path, runs: Iterable[TrainingRun], append: bool = False) -> None:
    path = Path(path)
    rows: list[list] = []
    if append and path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows.extend(list(reader))
    for run in runs:
        rec = run_to_record(run)
        rows.append([
            rec.run_id, rec.optimizer, rec.batch_size,
            json.dumps(rec.hyperparameters, sort_keys=True), rec.status,
            format(rec.peak_accuracy, ".17g"), rec.peak_epoch,
            format(rec.ttpa_seconds, ".17g"), format(rec.total_seconds, ".17g"),
        ])
    _atomic_write(path, rows, RUNS_CSV_COLUMNS)


def read_runs_csv(path: str | Path) -> list[RunRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RUNS_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected runs.csv header {reader.fieldnames}")
        for row in reader:
            records.append(RunRecord(
                run_id=row["run_id"],
                optimizer=row["optimizer"],
                batch_size=int(row["batch_size"]),
                hyperparameters=json.loads(row["hyperparams_json"]),
                status=row["status"],
                peak_accuracy=float(row["peak_accuracy"]),
                peak_epoch=int(row["peak_epoch"]),
                ttpa_seconds=float(row["ttpa_seconds"]),
                total_seconds=float(row["total_seconds"]),
            ))
    return records


def write_epochs_csv(path: str | Path, runs: Iterable[TrainingRun], append: bool = False) -> None:
    path = Path(path)
    rows: list[list] = []
    if append and path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows.extend(list(reader))
    for run in runs:
        for epoch, (acc, cum) in enumerate(zip(run.epoch_test_accuracy, run.epoch_wall_seconds)):
            rows.append([run.run_id, epoch, format(acc, ".17g"), format(cum, ".17g")])
    _atomic_write(path, rows, EPOCHS_CSV_COLUMNS)


def read_epochs_csv(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != EPOCHS_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected epochs.csv header {reader.fieldnames}")
        for row in reader:
            out.append({
                "run_id": row["run_id"],
                "epoch": int(row["epoch"]),
                "test_accuracy": float(row["test_accuracy"]),
                "cum_seconds": float(row["cum_seconds"]),
            })
    return out
