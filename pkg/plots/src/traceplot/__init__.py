"""Render benchmark figures from optimizer trace CSVs.

The input schema is the trace format written by the benchmark runner:
one row per evaluation point, identified by (run_id, repetition,
iteration) and carrying elbo / variance_ratio / test_lppd readouts plus
the run's descriptive keys (estimator, family, model, num_samples).
This package depends on that CSV contract only.
"""

from .core import (AGGREGATORS, TRACE_COLUMNS, X_FIELDS, Y_FIELDS,
                   ColumnError, PlotSpec, SelectionError, aggregate, ema,
                   load_traces, sample_trace_path)
from .render import render

__all__ = [
    "AGGREGATORS", "TRACE_COLUMNS", "X_FIELDS", "Y_FIELDS", "ColumnError",
    "PlotSpec", "SelectionError", "aggregate", "ema", "load_traces",
    "render", "sample_trace_path",
]
