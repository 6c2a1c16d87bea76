"""Evaluation protocols: full-data evidence-bound estimates, paired
variance-ratio measurement, and held-out predictive density.

All three draw their own noise from caller-supplied generators so that
evaluation never perturbs training streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .cv import pathwise_grad_batch
from .families import CapabilityError, transform
from .models import integrand_r

ELBO_SAMPLES = 500
VR_REPLICATES = 100
LPPD_SAMPLES = 1000


class ElboResult(NamedTuple):
    value: float
    se: float


@dataclass
class VarianceRatioReport:
    var_nocv: float
    var_cv: float
    ratio: float
    n_replicates: int
    iteration: int = 0


def eval_elbo(model, spec, lam, rng, n_samples=ELBO_SAMPLES):
    """Monte-Carlo evidence bound (1/n) sum_i r(T(eps_i; lam); lam).

    Full-batch integrand; returns the estimate and its standard error.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    lam = np.asarray(lam, dtype=float)
    eps = rng.standard_normal((n_samples, spec.base_dim))
    vals = np.asarray(integrand_r(model, spec, lam, eps))
    se = 0.0 if n_samples == 1 else float(vals.std(ddof=1) / np.sqrt(n_samples))
    return ElboResult(float(vals.mean()), se)


def variance_ratio(model, spec, lam, estimator, rng, n_samples,
                   n_replicates=VR_REPLICATES, batch=None, expect_rng=None,
                   iteration=0):
    """Paired variance-ratio procedure.

    Draw n_replicates independent gradient batches of n_samples each; for
    every batch record both the plain mean estimate and the CV-adjusted
    estimate built from the estimator's current state on the *same*
    samples. Each variance is the mean squared deviation around the
    replicate mean, summed over coordinates (the 1/n convention), and the
    ratio is var_cv / var_nocv. Pairing makes a no-op adjustment give a
    ratio of exactly 1.
    """
    lam = np.asarray(lam, dtype=float)
    base = np.empty((n_replicates, spec.d_lambda))
    adj = np.empty_like(base)
    for k in range(n_replicates):
        eps = rng.standard_normal((n_samples, spec.base_dim))
        gb = pathwise_grad_batch(model, spec, lam, eps, batch)
        base[k] = gb.mean(axis=0)
        adj[k] = estimator.vr_adjust(model, spec, lam, gb, eps, rng=expect_rng)
    var_nocv = float(base.var(axis=0).sum())
    var_cv = float(adj.var(axis=0).sum())
    if var_nocv == 0.0:
        ratio = 1.0 if var_cv == 0.0 else float("inf")
    else:
        ratio = var_cv / var_nocv
    return VarianceRatioReport(var_nocv, var_cv, ratio, n_replicates, iteration)


def test_lppd(model, spec, lam, rng, n_samples=LPPD_SAMPLES):
    """Log pointwise predictive density over the test split.

    sum_x log( (1/n) sum_z p(x | z) ) with z drawn from the variational
    distribution; stabilized with log-sum-exp.
    """
    if model.dataset.test_idx.size == 0:
        raise CapabilityError("model has no test split")
    lam = np.asarray(lam, dtype=float)
    eps = rng.standard_normal((n_samples, spec.base_dim))
    z = np.asarray(transform(spec, lam, eps))
    ll = np.asarray(model.test_loglik(z))            # (n_samples, n_test)
    per_point = logsumexp(ll, axis=0) - np.log(n_samples)
    return float(per_point.sum())
