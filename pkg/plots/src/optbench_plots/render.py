"""Render the benchmark's figure types from tidy analysis CSVs.

All three renderers consume the CSVs that `optbench analyze` writes
(boxplot_data.csv, trend_data.csv, ttpa_ratio_data.csv) and never compute
statistics themselves. Figures get one panel per treatment flag present
in the data, and the title block embeds the treatment flags and the
significance level carried in the CSV.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

OPTIMIZER_ORDER = ("sgd", "fr", "lbfgs")


class SchemaError(ValueError):
    """The input CSV is missing a required column."""


@dataclass(frozen=True)
class RenderSummary:
    kind: str
    out_paths: tuple[str, ...]
    panels: int
    cells: int


def read_tidy_csv(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise SchemaError(f"{path}: missing required column {column!r}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _panels(rows: list[dict]) -> list[str]:
    if "treatment" not in rows[0]:
        return ["all"]
    seen: list[str] = []
    for row in rows:
        if row["treatment"] not in seen:
            seen.append(row["treatment"])
    return seen


def _title(base: str, rows: list[dict], extra: str | None) -> str:
    parts = [extra] if extra else [base]
    parts.append("treatment: " + "/".join(_panels(rows)))
    if "significance" in rows[0]:
        parts.append(f"alpha={rows[0]['significance']}")
    return " | ".join(parts)


def _batch_order(rows: list[dict]) -> list[int]:
    return sorted({int(r["batch_size"]) for r in rows})


def _optimizer_order(rows: list[dict]) -> list[str]:
    present = {r["optimizer"] for r in rows}
    ordered = [o for o in OPTIMIZER_ORDER if o in present]
    return ordered + sorted(present - set(OPTIMIZER_ORDER))


def _save(fig, out_path: str | Path) -> tuple[str, ...]:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix:
        fig.savefig(out_path)
        paths = (str(out_path),)
    else:
        png = out_path.with_suffix(".png")
        svg = out_path.with_suffix(".svg")
        fig.savefig(png)
        fig.savefig(svg)
        paths = (str(png), str(svg))
    plt.close(fig)
    return paths


def _grouped_positions(batches: list[int], optimizers: list[str]):
    width = 0.8 / max(len(optimizers), 1)
    for bi, batch in enumerate(batches):
        for oi, optimizer in enumerate(optimizers):
            yield batch, optimizer, bi + (oi - (len(optimizers) - 1) / 2.0) * width, width


def render_box(csv_path: str | Path, out_path: str | Path, title: str | None = None) -> RenderSummary:
    """Grouped box plot of log peak accuracy, one panel per treatment,
    batch sizes ascending on the x axis."""
    rows = read_tidy_csv(csv_path, ("batch_size", "optimizer", "log_peak_accuracy"))
    panels = _panels(rows)
    batches = _batch_order(rows)
    optimizers = _optimizer_order(rows)
    fig, axes = plt.subplots(len(panels), 1, figsize=(9, 3.6 * len(panels)), squeeze=False)
    cells = 0
    for ax, panel in zip(axes[:, 0], panels):
        panel_rows = [r for r in rows if r.get("treatment", "all") == panel]
        for batch, optimizer, pos, width in _grouped_positions(batches, optimizers):
            vals = [
                float(r["log_peak_accuracy"])
                for r in panel_rows
                if int(r["batch_size"]) == batch and r["optimizer"] == optimizer
            ]
            if not vals:
                continue
            color = f"C{optimizers.index(optimizer)}"
            ax.boxplot(
                [vals], positions=[pos], widths=width * 0.9, patch_artist=True,
                boxprops={"facecolor": color, "alpha": 0.6},
                medianprops={"color": "black"},
            )
            cells += 1
        ax.set_xticks(range(len(batches)))
        ax.set_xticklabels([str(b) for b in batches])
        ax.set_xlabel("batch size")
        ax.set_ylabel("log peak accuracy")
        ax.set_title(panel)
        _legend_for(ax, optimizers)
    fig.suptitle(_title("Log peak accuracy by batch size", rows, title))
    fig.tight_layout()
    return RenderSummary(kind="box", out_paths=_save(fig, out_path), panels=len(panels), cells=cells)


def render_trend(csv_path: str | Path, out_path: str | Path, title: str | None = None) -> RenderSummary:
    """Mean peak accuracy across batch sizes, one marked line per optimizer."""
    rows = read_tidy_csv(csv_path, ("batch_size", "optimizer", "mean_peak"))
    panels = _panels(rows)
    batches = _batch_order(rows)
    optimizers = _optimizer_order(rows)
    fig, axes = plt.subplots(len(panels), 1, figsize=(9, 3.6 * len(panels)), squeeze=False)
    cells = 0
    for ax, panel in zip(axes[:, 0], panels):
        panel_rows = [r for r in rows if r.get("treatment", "all") == panel]
        for optimizer in optimizers:
            points = sorted(
                (int(r["batch_size"]), float(r["mean_peak"]))
                for r in panel_rows
                if r["optimizer"] == optimizer
            )
            if not points:
                continue
            xs = [i for i, b in enumerate(batches) if b in {p[0] for p in points}]
            ys = [y for _, y in points]
            ax.plot(xs, ys, marker="o", label=optimizer)
            cells += 1
        ax.set_xticks(range(len(batches)))
        ax.set_xticklabels([str(b) for b in batches])
        ax.set_xlabel("batch size")
        ax.set_ylabel("mean peak accuracy (%)")
        ax.set_title(panel)
        ax.legend()
    fig.suptitle(_title("Peak accuracy trend by batch size", rows, title))
    fig.tight_layout()
    return RenderSummary(kind="trend", out_paths=_save(fig, out_path), panels=len(panels), cells=cells)


def render_violin(csv_path: str | Path, out_path: str | Path, title: str | None = None) -> RenderSummary:
    """Violin of per-run TTPA ratios per (optimizer, batch size) cell,
    stacked panels per treatment. Constant cells draw as thin markers."""
    rows = read_tidy_csv(csv_path, ("batch_size", "optimizer", "ttpa_ratio"))
    panels = _panels(rows)
    if "treatment" in rows[0] and len(panels) == 1:
        warnings.warn(f"only one treatment ({panels[0]}) present; rendering a single panel")
    batches = _batch_order(rows)
    optimizers = _optimizer_order(rows)
    fig, axes = plt.subplots(len(panels), 1, figsize=(9, 3.6 * len(panels)), squeeze=False)
    cells = 0
    for ax, panel in zip(axes[:, 0], panels):
        panel_rows = [r for r in rows if r.get("treatment", "all") == panel]
        for batch, optimizer, pos, width in _grouped_positions(batches, optimizers):
            vals = [
                float(r["ttpa_ratio"])
                for r in panel_rows
                if int(r["batch_size"]) == batch and r["optimizer"] == optimizer
            ]
            if not vals:
                continue
            color = f"C{optimizers.index(optimizer)}"
            if len(vals) < 2 or np.ptp(vals) == 0.0:
                # a degenerate distribution still deserves a mark
                ax.hlines(vals[0], pos - width * 0.45, pos + width * 0.45, color=color, linewidth=2)
            else:
                parts = ax.violinplot([vals], positions=[pos], widths=width * 0.9, showmedians=True)
                for body in parts["bodies"]:
                    body.set_facecolor(color)
                    body.set_alpha(0.6)
            cells += 1
        ax.set_xticks(range(len(batches)))
        ax.set_xticklabels([str(b) for b in batches])
        ax.set_xlabel("batch size")
        ax.set_ylabel("TTPA ratio vs sgd")
        ax.set_title(panel)
        _legend_for(ax, optimizers)
    fig.suptitle(_title("Time-to-peak-accuracy ratios", rows, title))
    fig.tight_layout()
    return RenderSummary(kind="violin", out_paths=_save(fig, out_path), panels=len(panels), cells=cells)


def _legend_for(ax, optimizers: list[str]) -> None:
    handles = [plt.Line2D([0], [0], color=f"C{i}", lw=6, alpha=0.6) for i in range(len(optimizers))]
    ax.legend(handles, optimizers, loc="best", fontsize="small")


RENDERERS = {"box": render_box, "trend": render_trend, "violin": render_violin}
