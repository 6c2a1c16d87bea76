"""Command-line entry points.

  run       execute an experiment from a config file, write a trace CSV
  validate  parse and validate a config file, report the resolved settings
  variance  one-off variance-ratio measurement at a saved checkpoint
"""

import argparse
import sys

from .runner import load_config, measure_variance, run_experiment


def _build_parser():
    p = argparse.ArgumentParser(
        prog="pathcv",
        description="stochastic variational inference with control-variate "
                    "gradient estimators")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment, print the trace path")
    run.add_argument("--config", required=True, help="key = value config file")
    run.add_argument("--model", help="override: model kind")
    run.add_argument("--family", help="override: variational family kind")
    run.add_argument("--estimator", help="override: nocv | zvcv_gd | quadcv")
    run.add_argument("--num-samples", type=int, dest="num_samples",
                     help="override: gradient samples per iteration")
    run.add_argument("--iters", type=int, dest="iterations",
                     help="override: iteration count")
    run.add_argument("--reps", type=int, dest="repetitions",
                     help="override: repetition count")
    run.add_argument("--seed", type=int, help="override: base seed")
    run.add_argument("--out", dest="out_dir", help="override: output directory")

    val = sub.add_parser("validate", help="validate a config file")
    val.add_argument("--config", required=True)

    var = sub.add_parser("variance",
                         help="variance ratio at a saved parameter vector")
    var.add_argument("--config", required=True)
    var.add_argument("--checkpoint", required=True,
                     help="parameter checkpoint written by 'run'")
    return p


_RUN_OVERRIDES = ("model", "family", "estimator", "num_samples",
                  "iterations", "repetitions", "seed", "out_dir")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {k: getattr(args, k) for k in _RUN_OVERRIDES
                         if getattr(args, k) is not None}
            print(run_experiment(load_config(args.config, **overrides)))
        elif args.command == "validate":
            cfg = load_config(args.config)
            print(f"config OK: model={cfg.model} family={cfg.family} "
                  f"estimator={cfg.estimator} num_samples={cfg.num_samples} "
                  f"iterations={cfg.iterations} repetitions={cfg.repetitions} "
                  f"gamma_lambda={cfg.gamma_lambda}")
        else:
            rep = measure_variance(load_config(args.config), args.checkpoint)
            print(f"variance_ratio={rep.ratio:.6g} var_nocv={rep.var_nocv:.6g} "
                  f"var_cv={rep.var_cv:.6g} n_replicates={rep.n_replicates}")
        return 0
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
