"""Command-line front end: validate experiment files, run sweeps, run the
analysis, and render reports.

Exit codes are a stable contract for scripting: 0 success, 1 validation
failure, 2 runtime failure. The OPTBENCH_OUT environment variable
overrides --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import stats, sweep
from .objective import ModelSpec, model_from_config
from .optimizers import OPTIMIZER_HYPERPARAMETERS, validate_hyperparameters

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

PLOT_BOX_COLUMNS = ("treatment", "batch_size", "optimizer", "log_peak_accuracy", "significance")
PLOT_TREND_COLUMNS = ("treatment", "batch_size", "optimizer", "mean_peak", "significance")
PLOT_RATIO_COLUMNS = ("treatment", "batch_size", "optimizer", "ttpa_ratio", "significance")


class ExperimentFileError(ValueError):
    """The experiment file is unreadable or structurally wrong."""


@dataclass(frozen=True)
class ExperimentFile:
    """Parsed experiment configuration (TOML: key/value plus nested tables)."""

    model: ModelSpec
    dataset: sweep.DatasetSpec
    batch_sizes: tuple[int, ...]
    grids: dict[str, dict[str, list]]
    samples_per_optimizer: int
    seed: int
    epochs: int
    output_dir: str


def load_experiment_file(path: str | Path) -> ExperimentFile:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ExperimentFileError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ExperimentFileError(f"cannot parse {path}: {exc}") from exc
    try:
        model_cfg = raw["model"]
        data_cfg = raw["dataset"]
        model = model_from_config(
            model_cfg["kind"], layers=model_cfg.get("layers", ()), dim=model_cfg.get("dim", 0)
        )
        dataset = sweep.DatasetSpec(
            kind=data_cfg["kind"],
            train_count=int(data_cfg["train_count"]),
            test_count=int(data_cfg.get("test_count", 0)),
            classes=int(data_cfg["classes"]),
            seed=int(data_cfg.get("seed", raw.get("seed", 0))),
        )
        return ExperimentFile(
            model=model,
            dataset=dataset,
            batch_sizes=tuple(int(k) for k in raw["batch_sizes"]),
            grids={name: dict(grid) for name, grid in raw["grids"].items()},
            samples_per_optimizer=int(raw["samples_per_optimizer"]),
            seed=int(raw.get("seed", 0)),
            epochs=int(raw.get("epochs", 100)),
            output_dir=str(raw.get("output_dir", ".")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ExperimentFileError(f"bad experiment file {path}: {exc}") from exc


def validate_experiment(ef: ExperimentFile) -> list[str]:
    """Every constraint violation, without running anything."""
    problems: list[str] = []
    n = ef.dataset.train_count
    if ef.dataset.kind not in ("gaussians", "spirals"):
        problems.append(f"unknown dataset kind {ef.dataset.kind!r}")
    if n < 1:
        problems.append("dataset train_count must be >= 1")
    elif ef.dataset.classes >= 1 and n % ef.dataset.classes != 0:
        problems.append(f"train_count {n} not divisible by classes {ef.dataset.classes}")
    if ef.dataset.test_count % max(ef.dataset.classes, 1) != 0:
        problems.append(f"test_count {ef.dataset.test_count} not divisible by classes {ef.dataset.classes}")
    if ef.model.is_classifier:
        if ef.dataset.test_count < 1:
            problems.append("classifier models need a nonempty test split")
        if ef.model.layers[0] != 2:
            problems.append(f"model input width {ef.model.layers[0]} must be 2 (synthetic data is 2-D)")
        if ef.model.classes != ef.dataset.classes:
            problems.append(
                f"model class count {ef.model.classes} != dataset classes {ef.dataset.classes}"
            )
    if not ef.batch_sizes:
        problems.append("batch_sizes must be nonempty")
    for k in ef.batch_sizes:
        if k < 1:
            problems.append(f"batch size {k} must be >= 1")
        elif n >= 1 and n % k != 0:
            problems.append(f"batch size {k} does not divide training-set size {n}")
    if not ef.grids:
        problems.append("no optimizer grids declared")
    for name, grid in ef.grids.items():
        if name not in OPTIMIZER_HYPERPARAMETERS:
            problems.append(f"unknown optimizer {name!r} in grids")
            continue
        if not grid:
            problems.append(f"empty grid for optimizer {name!r}")
            continue
        pool = 1
        for hp_name, values in grid.items():
            if not isinstance(values, list) or not values:
                problems.append(f"grid {name}.{hp_name} must be a nonempty list")
            else:
                pool *= len(values)
        problems.extend(validate_hyperparameters(name, {k: v[0] if isinstance(v, list) and v else v for k, v in grid.items()}))
        if ef.samples_per_optimizer > pool:
            problems.append(
                f"samples_per_optimizer {ef.samples_per_optimizer} exceeds the {name} grid size {pool}"
            )
    if ef.samples_per_optimizer < 0:
        problems.append("samples_per_optimizer must be >= 0")
    if ef.epochs < 0:
        problems.append("epochs must be >= 0")
    if ef.seed < 0:
        problems.append("seed must be >= 0")
    return problems


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_configs(ef: ExperimentFile) -> list[sweep.ExperimentConfig]:
    """The deterministic run set for one experiment file: per optimizer,
    sample assignments from the expanded grid without replacement, then
    cross them with every batch size."""
    configs = []
    for opt_index, (name, grid) in enumerate(ef.grids.items()):
        assignments = sweep.expand_grid(grid)
        chosen = sweep.sample_configs(assignments, ef.samples_per_optimizer, seed=_derived_seed(ef.seed, opt_index))
        for batch in ef.batch_sizes:
            for idx, assignment in enumerate(chosen):
                configs.append(sweep.ExperimentConfig(
                    optimizer=name,
                    batch_size=batch,
                    hyperparameters=dict(assignment),
                    seed=_derived_seed(ef.seed, opt_index, batch, idx),
                    model=ef.model,
                    dataset=ef.dataset,
                    epochs=ef.epochs,
                    run_id=f"s{ef.seed}-{name}-k{batch}-{idx:03d}",
                ))
    return configs


def resolve_out(cli_out: str | None, file_out: str) -> Path:
    env = os.environ.get("OPTBENCH_OUT")
    if env:
        return Path(env)
    if cli_out:
        return Path(cli_out)
    return Path(file_out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        ef = load_experiment_file(args.config)
    except ExperimentFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    problems = validate_experiment(ef)
    for p in problems:
        print(f"invalid: {p}")
    if problems:
        return EXIT_VALIDATION
    print(f"ok: {args.config}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        ef = load_experiment_file(args.config)
    except ExperimentFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.seed is not None:
        ef = ExperimentFile(**{**ef.__dict__, "seed": int(args.seed)})
    problems = validate_experiment(ef)
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return EXIT_VALIDATION

    out = resolve_out(args.out, ef.output_dir)
    configs = build_configs(ef)
    try:
        runs = sweep.execute_configs(configs, parallelism=args.parallelism)
        out.mkdir(parents=True, exist_ok=True)
        sweep.write_runs_csv(out / "runs.csv", runs, append=args.append)
        sweep.write_epochs_csv(out / "epochs.csv", runs, append=args.append)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for run in runs:
        print(
            f"{run.run_id} status={run.status} peak={run.peak_accuracy:.4f} "
            f"ttpa={run.ttpa_seconds:.3f}s total={run.total_seconds:.3f}s"
        )
    print(f"wrote {out / 'runs.csv'} and {out / 'epochs.csv'} ({len(runs)} runs)")
    return EXIT_OK


def _variance_lines(records, threshold: float, treated: bool) -> list[str]:
    """Variance of the log response per optimizer at the best batch size
    (highest mean log peak): prints the variance-reduction evidence."""
    pool = stats.treat_outliers(records, threshold)[0] if treated else list(records)
    by_batch: dict[int, list[float]] = {}
    for r in pool:
        by_batch.setdefault(r.batch_size, []).append(math.log(100.0 * r.peak_accuracy))
    if not by_batch:
        return []
    best = max(by_batch, key=lambda k: float(np.mean(by_batch[k])))
    lines = [f"best batch size by mean log peak: {best}"]
    for optimizer in sorted({r.optimizer for r in pool}):
        vals = [
            math.log(100.0 * r.peak_accuracy)
            for r in pool
            if r.optimizer == optimizer and r.batch_size == best
        ]
        if len(vals) >= 2:
            lines.append(
                f"variance of log peak at batch {best} for {optimizer}: {np.var(vals, ddof=1):.6g}"
            )
    return lines


def _plot_rows(records, treated: bool, significance: float, threshold: float):
    """Tidy rows for the three plot CSVs, for one treatment mode."""
    label = "treated" if treated else "untreated"
    kept = stats.treat_outliers(records, threshold)[0] if treated else list(records)
    box = [
        (label, r.batch_size, r.optimizer, format(math.log(100.0 * r.peak_accuracy), ".17g"), significance)
        for r in kept
    ]
    cells: dict[tuple[int, str], list[float]] = {}
    for r in kept:
        cells.setdefault((r.batch_size, r.optimizer), []).append(100.0 * r.peak_accuracy)
    trend = [
        (label, batch, optimizer, format(float(np.mean(vals)), ".17g"), significance)
        for (batch, optimizer), vals in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    ]
    sgd_median: dict[int, float] = {}
    for batch in sorted({r.batch_size for r in kept}):
        ref = [r.ttpa_seconds for r in kept if r.optimizer == stats.SGD_REFERENCE and r.batch_size == batch]
        if ref:
            sgd_median[batch] = float(np.median(ref))
    ratio = [
        (label, r.batch_size, r.optimizer, format(r.ttpa_seconds / sgd_median[r.batch_size], ".17g"), significance)
        for r in kept
        if r.optimizer != stats.SGD_REFERENCE and r.batch_size in sgd_median and sgd_median[r.batch_size] > 0
    ]
    return box, trend, ratio


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_analyze(args) -> int:
    try:
        records = sweep.read_runs_csv(args.runs)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    modes = [True, False] if args.mode == "both" else [args.mode == "treated"]

    out = resolve_out(args.out, ".")
    reports: list[tuple[bool, dict]] = []
    try:
        for treated in modes:
            reports.append((treated, stats.build_report(
                records, treated, significance=args.significance, threshold=args.threshold
            )))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    box_rows, trend_rows, ratio_rows = [], [], []
    for treated, _ in reports:
        b, t, r = _plot_rows(records, treated, args.significance, args.threshold)
        box_rows += b
        trend_rows += t
        ratio_rows += r

    try:
        out.mkdir(parents=True, exist_ok=True)
        for treated, report in reports:
            name = "anova_report_treated.json" if treated else "anova_report_untreated.json"
            stats.write_report_json(out / name, report)
            print(f"wrote {out / name}")
        _write_csv(out / "boxplot_data.csv", PLOT_BOX_COLUMNS, box_rows)
        _write_csv(out / "trend_data.csv", PLOT_TREND_COLUMNS, trend_rows)
        _write_csv(out / "ttpa_ratio_data.csv", PLOT_RATIO_COLUMNS, ratio_rows)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {out / 'boxplot_data.csv'}, {out / 'trend_data.csv'}, {out / 'ttpa_ratio_data.csv'}")

    for treated, _ in reports:
        label = "treated" if treated else "untreated"
        if treated:
            removed = stats.treat_outliers(records, args.threshold)[1]
            print(f"[{label}] removed {len(removed)} outlier runs at threshold {args.threshold}")
        for line in _variance_lines(records, args.threshold, treated):
            print(f"[{label}] {line}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = stats.read_report_json(args.report)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        _print_report(report)
    except KeyError as exc:
        print(f"error: malformed report, missing {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _print_report(report: dict) -> None:
    print(f"treatment: {report.get('treatment', '?')}   transform: {report['transform']}")
    adj = report.get("adjustment", {})
    print(f"pairwise adjustment: {adj.get('method', '?')} at significance {adj.get('significance', '?')}")
    print()
    print(f"{'Source':<12} {'DF':>4} {'Type III SS':>14} {'Mean Square':>14} {'F Value':>10} {'Pr > F':>10}")
    for row in report["table"]:
        f_str = "" if row["f"] is None else f"{row['f']:.4g}"
        p_str = "" if row["p"] is None else ("<0.001" if row["p"] < 0.001 else f"{row['p']:.4g}")
        print(f"{row['source']:<12} {row['df']:>4} {row['ss']:>14.4f} {row['ms']:>14.4f} {f_str:>10} {p_str:>10}")
    print()
    print(f"{'Batch Size':<12} {'Optimizer':<12} {'LS Mean':>10} {'Letters':<8}")
    for sl in report["pairwise"]:
        for row in sl["rows"]:
            print(f"{sl['batch_size']:<12} {row['optimizer']:<12} {row['lsmean']:>10.4f} {row['letters']:<8}")
    print()
    if report["ttpa_ratios"]:
        print(f"{'Optimizer':<12} {'Batch Size':<12} {'Min':>8} {'Mean':>8} {'Median':>8} {'Max':>8}")
        for cell in report["ttpa_ratios"]:
            print(
                f"{cell['optimizer']:<12} {cell['batch_size']:<12} {cell['min']:>8.3f} "
                f"{cell['mean']:>8.3f} {cell['median']:>8.3f} {cell['max']:>8.3f}"
            )


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optbench",
        description="Benchmark SGD, Fletcher-Reeves NCG, and L-BFGS under minibatching and analyze the results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check an experiment file without running anything")
    p_validate.add_argument("--config", required=True, help="experiment file (TOML)")
    p_validate.set_defaults(func=cmd_validate)

    p_sweep = sub.add_parser("sweep", help="run the sampled configurations and write runs.csv/epochs.csv")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--parallelism", type=int, default=1, help="worker processes")
    p_sweep.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p_sweep.add_argument("--out", default=None, help="output directory (default: experiment file's)")
    p_sweep.add_argument("--append", action="store_true", help="append to existing CSVs instead of replacing")
    p_sweep.set_defaults(func=cmd_sweep)

    p_analyze = sub.add_parser("analyze", help="run the statistics pipeline over a runs.csv")
    p_analyze.add_argument("--runs", required=True, help="runs.csv from a sweep")
    group = p_analyze.add_mutually_exclusive_group()
    group.add_argument("--treated", dest="mode", action="store_const", const="treated")
    group.add_argument("--untreated", dest="mode", action="store_const", const="untreated")
    group.add_argument("--both", dest="mode", action="store_const", const="both")
    p_analyze.add_argument("--significance", type=float, default=stats.DEFAULT_SIGNIFICANCE)
    p_analyze.add_argument("--threshold", type=float, default=stats.DEFAULT_OUTLIER_THRESHOLD)
    p_analyze.add_argument("--out", default=None)
    p_analyze.set_defaults(func=cmd_analyze, mode="treated")

    p_report = sub.add_parser("report", help="render an anova_report.json as text tables")
    p_report.add_argument("--report", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # anything unplanned is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
