"""Command-line entry point: plot --traces <glob> --x ... --out <dir>."""

import argparse
import glob
import sys

from .core import PlotSpec, SelectionError
from .render import render

_X_CHOICES = {"iteration": "iteration", "wall": "wall_ms"}
_Y_CHOICES = {"elbo": "elbo", "vr": "variance_ratio", "lppd": "test_lppd"}


def build_parser():
    p = argparse.ArgumentParser(
        prog="plot",
        description="Render aggregate figures from benchmark trace CSVs.")
    p.add_argument("--traces", required=True,
                   help="glob pattern matching trace CSV files")
    p.add_argument("--x", choices=sorted(_X_CHOICES), default="iteration")
    p.add_argument("--y", choices=sorted(_Y_CHOICES), default="elbo")
    p.add_argument("--agg", choices=("median", "mean"), default="median")
    p.add_argument("--ema", type=float, default=0.9,
                   help="smoothing factor in [0, 1); 0 disables smoothing")
    p.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = PlotSpec(x=_X_CHOICES[args.x], y=_Y_CHOICES[args.y],
                        aggregator=args.agg, smoothing=args.ema,
                        out_dir=args.out)
        paths = sorted(glob.glob(args.traces))
        if not paths:
            raise SelectionError(f"no trace files match '{args.traces}'")
        outputs = render(paths, spec)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for png, agg_csv in outputs:
        print(f"wrote {png} and {agg_csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
