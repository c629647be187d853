"""The analysis pipeline: log transform, outlier treatment, two-way ANOVA
with interaction (Type III SS under sum-to-zero coding), pairwise tests
with compact letter groupings, correlation tests, and TTPA ratio tables.

Everything here is a pure function over immutable tables; factor A is the
batch size and factor B the optimizer in this artifact, but the machinery
is generic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

DEFAULT_SIGNIFICANCE = 0.05
DEFAULT_OUTLIER_THRESHOLD = 0.15

ANOVA_SOURCES = ("factor_a", "factor_b", "interaction", "error")


# ---------------------------------------------------------------------------
# observation tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationTable:
    """Rows of (factor A level, factor B level, response), column-wise."""

    factor_a: tuple
    factor_b: tuple
    response: tuple

    def __post_init__(self) -> None:
        if not (len(self.factor_a) == len(self.factor_b) == len(self.response)):
            raise ValueError("observation columns must have equal length")

    def __len__(self) -> int:
        return len(self.response)

    @property
    def levels_a(self) -> list:
        return sorted(set(self.factor_a))

    @property
    def levels_b(self) -> list:
        return sorted(set(self.factor_b))


def scale_responses(table: ObservationTable, factor: float) -> ObservationTable:
    """Multiply every response by a constant (fractions -> percent uses 100)."""
    return ObservationTable(table.factor_a, table.factor_b, tuple(r * factor for r in table.response))


def log_transform(table: ObservationTable) -> ObservationTable:
    """Replace each response by its natural log.

    Callers feed percent-scale accuracies (see :func:`scale_responses`),
    so a 76% peak becomes ln 76 ~ 4.33. Nonpositive responses are a
    domain error and the message names the offending row.
    """
    out = []
    for i, r in enumerate(table.response):
        if r <= 0.0:
            raise ValueError(
                f"log transform needs positive responses; row {i} "
                f"({table.factor_a[i]}, {table.factor_b[i]}) has {r}"
            )
        out.append(math.log(r))
    return ObservationTable(table.factor_a, table.factor_b, tuple(out))


def treat_outliers(runs: Sequence, threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> tuple[list, list]:
    """Split runs into (kept, removed) by peak accuracy <= threshold.

    Both partitions come back so analyses can run treated and untreated.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    kept, removed = [], []
    for run in runs:
        (removed if run.peak_accuracy <= threshold else kept).append(run)
    return kept, removed


# ---------------------------------------------------------------------------
# tail probabilities
# ---------------------------------------------------------------------------


def f_p_value(f: float, df1: int, df2: int) -> float:
    """Upper-tail probability of the F(df1, df2) distribution, via the
    regularized incomplete beta function."""
    if df1 < 1 or df2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if f < 0.0 or not np.isfinite(f):
        raise ValueError("F statistic must be finite and >= 0")
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def t_p_value_two_sided(t: float, df: int) -> float:
    """Two-sided Student-t tail probability."""
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if not np.isfinite(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


# ---------------------------------------------------------------------------
# two-way model with interaction
# ---------------------------------------------------------------------------


def _contrast_matrix(levels: int) -> np.ndarray:
    """Sum-to-zero contrasts: level i -> row i of a (levels x levels-1)
    matrix; the last level carries -1 in every column."""
    c = np.zeros((levels, levels - 1))
    c[: levels - 1, :] = np.eye(levels - 1)
    c[levels - 1, :] = -1.0
    return c


@dataclass(frozen=True)
class TwoWayModel:
    """Least-squares fit of response on sum-to-zero main effects and the
    full interaction. Cell predictions equal observed cell means whenever
    every cell is nonempty."""

    levels_a: tuple
    levels_b: tuple
    coefficients: np.ndarray
    residual_ss: float
    error_df: int
    n: int
    cell_means: np.ndarray    # (a, b) model predictions per cell
    cell_counts: np.ndarray   # (a, b) observation counts

    @property
    def mse(self) -> float:
        return self.residual_ss / self.error_df

    def ls_mean(self, level_a, level_b) -> float:
        i = self.levels_a.index(level_a)
        j = self.levels_b.index(level_b)
        return float(self.cell_means[i, j])


def _design_columns(table: ObservationTable):
    levels_a, levels_b = table.levels_a, table.levels_b
    ia = np.array([levels_a.index(v) for v in table.factor_a])
    ib = np.array([levels_b.index(v) for v in table.factor_b])
    ca = _contrast_matrix(len(levels_a))
    cb = _contrast_matrix(len(levels_b))
    xa = ca[ia]
    xb = cb[ib]
    n = len(table)
    xab = (xa[:, :, None] * xb[:, None, :]).reshape(n, -1)
    ones = np.ones((n, 1))
    return levels_a, levels_b, ia, ib, ca, cb, ones, xa, xb, xab


def _rss(x: np.ndarray, y: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    return float(resid @ resid)


def fit_two_way_model(table: ObservationTable) -> TwoWayModel:
    """Fit the full factorial model. Errors name an empty cell when one
    exists and reject designs without error degrees of freedom."""
    levels_a, levels_b = table.levels_a, table.levels_b
    if len(levels_a) < 2 or len(levels_b) < 2:
        raise ValueError("both factors need at least 2 observed levels")
    counts = np.zeros((len(levels_a), len(levels_b)), dtype=int)
    for va, vb in zip(table.factor_a, table.factor_b):
        counts[levels_a.index(va), levels_b.index(vb)] += 1
    empty = np.argwhere(counts == 0)
    if empty.size:
        i, j = empty[0]
        raise ValueError(f"empty design cell ({levels_a[i]}, {levels_b[j]})")
    n = len(table)
    error_df = n - counts.size
    if error_df <= 0:
        raise ValueError("no error degrees of freedom (need replicate observations)")

    _, _, _, _, ca, cb, ones, xa, xb, xab = _design_columns(table)
    x = np.hstack([ones, xa, xb, xab])
    y = np.asarray(table.response, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    rss = float(resid @ resid)

    a, b = len(levels_a), len(levels_b)
    cell_means = np.zeros((a, b))
    for i in range(a):
        for j in range(b):
            row = np.concatenate([[1.0], ca[i], cb[j], np.outer(ca[i], cb[j]).ravel()])
            cell_means[i, j] = row @ coef
    return TwoWayModel(
        levels_a=tuple(levels_a),
        levels_b=tuple(levels_b),
        coefficients=coef,
        residual_ss=rss,
        error_df=error_df,
        n=n,
        cell_means=cell_means,
        cell_counts=counts,
    )


@dataclass(frozen=True)
class AnovaRow:
    source: str
    df: int
    ss: float
    ms: float
    f: float | None
    p: float | None


@dataclass(frozen=True)
class AnovaTable:
    rows: tuple[AnovaRow, ...]
    total_df: int

    def row(self, source: str) -> AnovaRow:
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)


def anova_type3(table: ObservationTable) -> AnovaTable:
    """Type III decomposition: each term's SS is the residual-SS increase
    when that term is dropped from the full sum-to-zero model.

    Zero-SS sources report F = 0, p = 1 by convention; when the error MS
    is zero a nonzero source reports p = 0.
    """
    model = fit_two_way_model(table)
    _, _, _, _, _, _, ones, xa, xb, xab = _design_columns(table)
    y = np.asarray(table.response, dtype=np.float64)
    rss_full = model.residual_ss
    drops = {
        "factor_a": np.hstack([ones, xb, xab]),
        "factor_b": np.hstack([ones, xa, xab]),
        "interaction": np.hstack([ones, xa, xb]),
    }
    a, b = len(model.levels_a), len(model.levels_b)
    dfs = {"factor_a": a - 1, "factor_b": b - 1, "interaction": (a - 1) * (b - 1)}
    mse = model.mse
    rows = []
    for source, x_red in drops.items():
        ss = max(_rss(x_red, y) - rss_full, 0.0)
        df = dfs[source]
        ms = ss / df
        if ss == 0.0:
            f_stat, p = 0.0, 1.0
        elif mse == 0.0:
            f_stat, p = math.inf, 0.0
        else:
            f_stat = ms / mse
            p = f_p_value(f_stat, df, model.error_df)
        rows.append(AnovaRow(source=source, df=df, ss=ss, ms=ms, f=f_stat, p=p))
    rows.append(AnovaRow(source="error", df=model.error_df, ss=rss_full, ms=mse, f=None, p=None))
    return AnovaTable(rows=tuple(rows), total_df=model.n - 1)


# ---------------------------------------------------------------------------
# pairwise comparisons with compact letter display
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseRow:
    level_b: object
    ls_mean: float
    letters: str


@dataclass(frozen=True)
class PairwiseSlice:
    level_a: object
    rows: tuple[PairwiseRow, ...]   # sorted by descending LS mean


@dataclass(frozen=True)
class PairwiseResult:
    slices: tuple[PairwiseSlice, ...]
    significance: float
    adjustment: str
    comparisons_per_slice: int


def compact_letter_display(order: Sequence, significant: Callable[[object, object], bool]) -> dict:
    """Insert-and-absorb letter assignment over levels in display order.

    Two levels share a letter exactly when their pairwise test is not
    significant: each significant pair splits every column holding both,
    and absorption drops columns that became subsets of others.
    """
    columns: list[set] = [set(order)]
    for i in range(len(order)):
        for j in range(i + 1, len(order)):
            u, v = order[i], order[j]
            if not significant(u, v):
                continue
            split: list[set] = []
            for col in columns:
                if u in col and v in col:
                    split.extend([col - {u}, col - {v}])
                else:
                    split.append(col)
            uniq: list[set] = []
            for col in split:
                if col and col not in uniq:
                    uniq.append(col)
            columns = [c for c in uniq if not any(c < other for other in uniq)]
    rank = {level: k for k, level in enumerate(order)}
    columns.sort(key=lambda col: min(rank[level] for level in col))
    letters = {level: "" for level in order}
    for idx, col in enumerate(columns):
        mark = _letter(idx)
        for level in col:
            letters[level] += mark
    return {level: "".join(sorted(s)) for level, s in letters.items()}


def _letter(idx: int) -> str:
    if idx < 26:
        return chr(ord("A") + idx)
    return chr(ord("A") + idx // 26 - 1) + chr(ord("A") + idx % 26)


def pairwise_by_slice(model: TwoWayModel, significance: float = DEFAULT_SIGNIFICANCE) -> PairwiseResult:
    """Within each factor-A level, compare every pair of factor-B LS means
    with t tests on the pooled error MS, Bonferroni-adjusted over the
    slice's comparisons, and assign compact letters."""
    if not 0.0 < significance < 1.0:
        raise ValueError("significance must lie in (0, 1)")
    b = len(model.levels_b)
    m = b * (b - 1) // 2
    slices = []
    for i, level_a in enumerate(model.levels_a):
        means = {lb: float(model.cell_means[i, j]) for j, lb in enumerate(model.levels_b)}
        counts = {lb: int(model.cell_counts[i, j]) for j, lb in enumerate(model.levels_b)}
        order = sorted(model.levels_b, key=lambda lb: (-means[lb], str(lb)))

        adjusted: dict[frozenset, float] = {}
        for j in range(b):
            for k in range(j + 1, b):
                u, v = model.levels_b[j], model.levels_b[k]
                se = math.sqrt(model.mse * (1.0 / counts[u] + 1.0 / counts[v]))
                if se == 0.0:
                    p = 1.0 if means[u] == means[v] else 0.0
                else:
                    t = (means[u] - means[v]) / se
                    p = t_p_value_two_sided(t, model.error_df)
                adjusted[frozenset((u, v))] = min(1.0, p * m)

        letters = compact_letter_display(
            order, lambda u, v: adjusted[frozenset((u, v))] < significance
        )
        rows = tuple(PairwiseRow(level_b=lb, ls_mean=means[lb], letters=letters[lb]) for lb in order)
        slices.append(PairwiseSlice(level_a=level_a, rows=rows))
    return PairwiseResult(
        slices=tuple(slices),
        significance=significance,
        adjustment="bonferroni",
        comparisons_per_slice=m,
    )


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    t: float
    p: float
    n: int


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Sample Pearson r with the exact t test: t = r sqrt((n-2)/(1-r^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    r = float(xc @ yc) / math.sqrt(sx * sy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return CorrelationResult(r=r, t=math.inf if r > 0 else -math.inf, p=0.0, n=n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return CorrelationResult(r=r, t=t, p=t_p_value_two_sided(t, n - 2), n=n)


# ---------------------------------------------------------------------------
# time-to-peak-accuracy ratios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatioCell:
    optimizer: str
    batch_size: int
    min: float
    mean: float
    median: float
    max: float


@dataclass(frozen=True)
class RatioSummary:
    cells: tuple[RatioCell, ...]
    treated: bool


SGD_REFERENCE = "sgd"


def ttpa_ratio_summary(runs: Sequence, treated: bool, threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> RatioSummary:
    """Per (non-SGD optimizer, batch size): min/mean/median/max of that
    cell's TTPA distribution divided by the same statistic of the SGD
    cell at the same batch size."""
    pool = treat_outliers(runs, threshold)[0] if treated else list(runs)
    ttpas: dict[tuple[str, int], list[float]] = {}
    for run in pool:
        ttpas.setdefault((run.optimizer, run.batch_size), []).append(run.ttpa_seconds)

    cells = []
    others = sorted({o for o, _ in ttpas} - {SGD_REFERENCE})
    for optimizer in others:
        for batch in sorted({k for o, k in ttpas if o == optimizer}):
            ref = ttpas.get((SGD_REFERENCE, batch))
            if not ref:
                raise ValueError(f"no {SGD_REFERENCE} reference runs at batch size {batch}")
            mine = np.asarray(ttpas[(optimizer, batch)])
            ref_arr = np.asarray(ref)
            cells.append(RatioCell(
                optimizer=optimizer,
                batch_size=batch,
                min=float(mine.min() / ref_arr.min()),
                mean=float(mine.mean() / ref_arr.mean()),
                median=float(np.median(mine) / np.median(ref_arr)),
                max=float(mine.max() / ref_arr.max()),
            ))
    return RatioSummary(cells=tuple(cells), treated=treated)


# ---------------------------------------------------------------------------
# report assembly and 17-significant-digit JSON
# ---------------------------------------------------------------------------

REPORT_SOURCE_NAMES = {
    "factor_a": "batch_size",
    "factor_b": "optimizer",
    "interaction": "interaction",
    "error": "error",
}


def build_report(
    runs: Sequence,
    treated: bool,
    significance: float = DEFAULT_SIGNIFICANCE,
    threshold: float = DEFAULT_OUTLIER_THRESHOLD,
) -> dict:
    """Full analysis for one treatment mode, as the report dictionary.

    Responses are peak accuracies scaled to percent and log-transformed;
    correlations relate that response to numeric batch size per optimizer.
    """
    kept = treat_outliers(runs, threshold)[0] if treated else list(runs)
    table = ObservationTable(
        factor_a=tuple(r.batch_size for r in kept),
        factor_b=tuple(r.optimizer for r in kept),
        response=tuple(r.peak_accuracy for r in kept),
    )
    logged = log_transform(scale_responses(table, 100.0))
    model = fit_two_way_model(logged)
    anova = anova_type3(logged)
    pairwise = pairwise_by_slice(model, significance)
    ratios = ttpa_ratio_summary(runs, treated, threshold)

    correlations = []
    for optimizer in logged.levels_b:
        xs = [float(a) for a, b in zip(logged.factor_a, logged.factor_b) if b == optimizer]
        ys = [r for r, b in zip(logged.response, logged.factor_b) if b == optimizer]
        try:
            c = pearson_correlation(xs, ys)
            correlations.append({"optimizer": optimizer, "r": c.r, "t": c.t, "p": c.p, "n": c.n})
        except ValueError:
            correlations.append({"optimizer": optimizer, "r": None, "t": None, "p": None, "n": len(xs)})

    counts = {
        f"{model.levels_a[i]}|{model.levels_b[j]}": int(model.cell_counts[i, j])
        for i in range(len(model.levels_a))
        for j in range(len(model.levels_b))
    }
    balanced = bool(np.all(model.cell_counts == model.cell_counts.flat[0]))
    return {
        "design": {
            "levels": {"batch_size": list(model.levels_a), "optimizer": list(model.levels_b)},
            "counts": counts,
            "balanced": balanced,
        },
        "transform": "ln(percent peak accuracy)",
        "outlier_threshold": threshold if treated else None,
        "treatment": "treated" if treated else "untreated",
        "adjustment": {"method": pairwise.adjustment, "significance": significance,
                       "comparisons_per_slice": pairwise.comparisons_per_slice},
        "table": [
            {"source": REPORT_SOURCE_NAMES[row.source], "df": row.df, "ss": row.ss,
             "ms": row.ms, "f": row.f, "p": row.p}
            for row in anova.rows
        ],
        "pairwise": [
            {"batch_size": sl.level_a,
             "rows": [{"optimizer": r.level_b, "lsmean": r.ls_mean, "letters": r.letters} for r in sl.rows]}
            for sl in pairwise.slices
        ],
        "correlations": correlations,
        "ttpa_ratios": [
            {"optimizer": c.optimizer, "batch_size": c.batch_size,
             "min": c.min, "mean": c.mean, "median": c.median, "max": c.max}
            for c in ratios.cells
        ],
    }


def _json_17g(value, indent: int = 0) -> str:
    pad = "  " * indent
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, Mapping):
        if not value:
            return "{}"
        items = [
            f'{pad}  {json.dumps(str(k))}: {_json_17g(v, indent + 1)}' for k, v in value.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{pad}  {_json_17g(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(value)!r}")


def write_report_json(path: str | Path, report: Mapping) -> None:
    """Write the report with every real rendered at 17 significant digits,
    which round-trips float64 exactly."""
    Path(path).write_text(_json_17g(report) + "\n")


def read_report_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
