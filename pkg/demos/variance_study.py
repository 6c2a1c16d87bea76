"""Variance-reduction study on a synthetic hierarchical Poisson problem.

Five independent mean-field fits are trained to convergence with the
plain estimator; at each converged parameter vector the paired
variance-ratio protocol (100 replicate batches, same draws with and
without the CV) scores three adjustments: the quadratic-surrogate CV and
the polynomial-feature CV at orders 1 and 2. Ratios below 1 mean the
adjustment helped. The quadratic surrogate reliably helps near an
optimum, where the log-joint is locally close to its quadratic model;
the order-2 features rarely improve on order 1 here.
"""

import os
import tempfile

import numpy as np

from pathcv.evaluate import variance_ratio
from pathcv.families import MEAN_FIELD, make_family
from pathcv.models import synth_frisk_text
from pathcv.runner import (EXPECT, VR, RunConfig, _stream, build_model,
                           load_checkpoint, run_experiment, validate_config,
                           warmed_estimator)


def main():
    out = "demos_out/frisk"
    os.makedirs(out, exist_ok=True)
    data = os.path.join(out, "frisk.csv")
    with open(data, "w") as fh:
        fh.write(synth_frisk_text(np.random.default_rng(7)))

    base = dict(model="hier_poisson_frisk", family=MEAN_FIELD,
                num_samples=10, dataset_path=data, eval_samples=100,
                vr_replicates=100, out_dir=out)
    ratios = {"quadcv": [], "zvcv order 1": [], "zvcv order 2": []}
    for seed in range(5):
        cfg = validate_config(RunConfig(estimator="nocv", iterations=8000,
                                        eval_every=8000, vr_every=8000,
                                        repetitions=1, seed=seed, **base))
        run_experiment(cfg)
        lam, _ = load_checkpoint(
            os.path.join(out, f"hier_poisson_frisk-{MEAN_FIELD}-nocv"
                              f"-L10-seed{seed}-rep0.ckpt"))
        model = build_model(cfg)
        spec = make_family(MEAN_FIELD, model.d_z)
        row = [f"fit {seed}:"]
        for name, est, kw in (("quadcv", "quadcv", {}),
                              ("zvcv order 1", "zvcv_gd", dict(order=1)),
                              ("zvcv order 2", "zvcv_gd", dict(order=2))):
            c = validate_config(RunConfig(estimator=est, iterations=1,
                                          repetitions=1, seed=seed,
                                          **{**base, **kw}))
            state = warmed_estimator(c, model, spec, lam)
            rep = variance_ratio(model, spec, lam, state,
                                 _stream(c.seed, 0, VR), c.num_samples,
                                 n_replicates=c.vr_replicates,
                                 expect_rng=_stream(c.seed, 0, EXPECT,
                                                    10 ** 6))
            ratios[name].append(rep.ratio)
            row.append(f"{name} {rep.ratio:.3f}")
        print("  ".join(row))
    print()
    for name, vals in ratios.items():
        print(f"median variance ratio, {name:<13}: "
              f"{float(np.median(vals)):.3f}")


if __name__ == "__main__":
    main()
