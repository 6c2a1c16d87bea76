"""Figure and aggregated-CSV output."""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .core import aggregate, load_traces

AGG_COLUMNS = ("estimator", "num_samples", "x", "value", "min", "max")

_X_LABEL = {"iteration": "iteration", "wall_ms": "wall-clock time (ms)"}
_Y_LABEL = {"elbo": "ELBO", "variance_ratio": "variance ratio",
            "test_lppd": "test lppd"}


def build_figure(series_list, spec, title):
    """One axes: a bold aggregate line plus a min-max band per series."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for s in series_list:
        label = f"{s.estimator} (L={s.num_samples})"
        line, = ax.plot(s.x, s.value, linewidth=2.2, label=label)
        ax.fill_between(s.x, s.lo, s.hi, alpha=0.25,
                        color=line.get_color(), linewidth=0)
    ax.set_xlabel(_X_LABEL[spec.x])
    ax.set_ylabel(_Y_LABEL[spec.y])
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return fig


def write_aggregated_csv(path, series_list):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGG_COLUMNS)
        for s in series_list:
            for i in range(s.x.size):
                writer.writerow([
                    s.estimator, s.num_samples,
                    format(float(s.x[i]), ".17g"),
                    format(float(s.value[i]), ".17g"),
                    format(float(s.lo[i]), ".17g"),
                    format(float(s.hi[i]), ".17g"),
                ])


def render(trace_paths, spec):
    """Write one PNG + aggregated CSV per (model, family); return paths."""
    rows = load_traces(trace_paths)
    figures = aggregate(rows, spec)
    os.makedirs(spec.out_dir, exist_ok=True)
    outputs = []
    for (model, family), series_list in figures.items():
        stem = f"{model}-{family}-{spec.y}-{spec.x}"
        fig = build_figure(series_list, spec, f"{model} / {family}")
        png = os.path.join(spec.out_dir, stem + ".png")
        fig.savefig(png, dpi=120)
        plt.close(fig)
        agg_csv = os.path.join(spec.out_dir, stem + ".csv")
        write_aggregated_csv(agg_csv, series_list)
        outputs.append((png, agg_csv))
    return outputs
