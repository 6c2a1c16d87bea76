"""Trace loading, smoothing and cross-repetition aggregation.

A series is one (estimator, num_samples) pair inside one (model, family)
figure. Its repetitions are the distinct (run_id, repetition) pairs, so
the same estimator run at several seeds contributes every repetition.
Smoothing is an exponential moving average applied to each repetition's
recorded sequence before any aggregation:

    y'_0 = y_0,   y'_t = f * y'_{t-1} + (1 - f) * y_t,   0 <= f < 1.

Aggregation then takes the median or mean across repetitions at each
grid point, with min-max giving the shaded band. On the iteration axis
the grid is the set of iterations recorded by every repetition; on the
wall-clock axis each repetition's cumulative wall_ms is interpolated
onto a common WALL_GRID_POINTS-point grid spanning the overlap of all
repetitions' time ranges.
"""

import csv
from dataclasses import dataclass

import numpy as np

TRACE_COLUMNS = ("run_id", "repetition", "iteration", "wall_ms", "elbo",
                 "variance_ratio", "test_lppd", "estimator", "family",
                 "model", "num_samples", "seed")

X_FIELDS = ("iteration", "wall_ms")
Y_FIELDS = ("elbo", "variance_ratio", "test_lppd")
AGGREGATORS = ("median", "mean")

WALL_GRID_POINTS = 200


class ColumnError(ValueError):
    """Trace file header does not match the expected schema."""


class SelectionError(ValueError):
    """No data rows survive the requested selection."""


@dataclass(frozen=True)
class PlotSpec:
    x: str = "iteration"
    y: str = "elbo"
    aggregator: str = "median"
    smoothing: float = 0.9
    out_dir: str = "figures"

    def __post_init__(self):
        if self.x not in X_FIELDS:
            raise ValueError(f"x must be one of {X_FIELDS}, got '{self.x}'")
        if self.y not in Y_FIELDS:
            raise ValueError(f"y must be one of {Y_FIELDS}, got '{self.y}'")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(
                f"aggregator must be one of {AGGREGATORS}, got "
                f"'{self.aggregator}'")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing factor must lie in [0, 1)")


@dataclass
class Series:
    """Aggregated values for one (estimator, num_samples) pair."""
    estimator: str
    num_samples: int
    x: np.ndarray
    value: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_reps: int = 0


def sample_trace_path():
    """Path of the bundled two-estimator, two-repetition example trace."""
    import importlib.resources
    return str(importlib.resources.files("traceplot") / "data"
               / "sample_trace.csv")


def load_traces(paths):
    """Rows from every trace file, after an exact header check per file."""
    paths = list(paths)
    if not paths:
        raise SelectionError("at least one trace file is required")
    rows = []
    for path in paths:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != TRACE_COLUMNS:
                missing = [c for c in TRACE_COLUMNS if c not in header]
                extra = [c for c in header if c not in TRACE_COLUMNS]
                raise ColumnError(
                    f"{path}: trace columns do not match; missing "
                    f"{missing or 'none'}, unexpected {extra or 'none'}")
            for raw in reader:
                rows.append(dict(zip(TRACE_COLUMNS, raw)))
    return rows


def ema(values, factor):
    """Exponential moving average; factor 0 returns the values unchanged."""
    values = np.asarray(values, dtype=float)
    if factor == 0.0 or values.size == 0:
        return values.copy()
    out = np.empty_like(values)
    out[0] = values[0]
    for i in range(1, values.size):
        out[i] = factor * out[i - 1] + (1.0 - factor) * values[i]
    return out


def _collect(rows, y):
    """figures[(model, family)][(estimator, L)][(run_id, rep)] -> row list.

    Rows whose y field is empty (unmeasured or failed evaluation points)
    are dropped here.
    """
    figures = {}
    for row in rows:
        if row[y] == "":
            continue
        fig_key = (row["model"], row["family"])
        ser_key = (row["estimator"], int(row["num_samples"]))
        rep_key = (row["run_id"], int(row["repetition"]))
        figures.setdefault(fig_key, {}).setdefault(ser_key, {}) \
               .setdefault(rep_key, []).append(row)
    return figures


def _rep_curve(rep_rows, spec):
    """(x, smoothed y) for one repetition, ordered by iteration."""
    rep_rows = sorted(rep_rows, key=lambda r: int(r["iteration"]))
    if spec.x == "iteration":
        x = np.array([float(r["iteration"]) for r in rep_rows])
    else:
        x = np.array([float(r["wall_ms"]) for r in rep_rows])
    y = ema([float(r[spec.y]) for r in rep_rows], spec.smoothing)
    return x, y


def _combine(curves, spec):
    """Align repetition curves on a common grid and aggregate."""
    if spec.x == "iteration":
        common = set(curves[0][0].tolist())
        for x, _ in curves[1:]:
            common &= set(x.tolist())
        if not common:
            raise SelectionError("repetitions share no common iteration")
        grid = np.array(sorted(common))
        mat = np.empty((len(curves), grid.size))
        for i, (x, y) in enumerate(curves):
            pos = {v: j for j, v in enumerate(x.tolist())}
            mat[i] = y[[pos[v] for v in grid.tolist()]]
    else:
        lo = max(float(x[0]) for x, _ in curves)
        hi = min(float(x[-1]) for x, _ in curves)
        if not lo < hi:
            raise SelectionError("repetitions share no common time range")
        grid = np.linspace(lo, hi, WALL_GRID_POINTS)
        mat = np.vstack([np.interp(grid, x, y) for x, y in curves])
    agg = np.median(mat, axis=0) if spec.aggregator == "median" \
        else mat.mean(axis=0)
    return grid, agg, mat.min(axis=0), mat.max(axis=0)


def aggregate(rows, spec):
    """{(model, family): [Series, ...]} ready for rendering."""
    figures = _collect(rows, spec.y)
    if not figures:
        raise SelectionError(f"no rows carry a '{spec.y}' value")
    out = {}
    for fig_key, series_map in sorted(figures.items()):
        series = []
        for (est, L), reps in sorted(series_map.items()):
            curves = [_rep_curve(r, spec) for _, r in sorted(reps.items())]
            grid, agg, lo, hi = _combine(curves, spec)
            series.append(Series(est, L, grid, agg, lo, hi, len(curves)))
        out[fig_key] = series
    return out
