"""Pathwise gradient batches and control-variate machinery.

The estimator pipeline works on three aligned objects:

  * a gradient batch ``I``: L rows of per-sample pathwise gradients of the
    evidence-bound integrand w.r.t. the variational parameters,
  * a CvMatrix ``C``: the control variate evaluated on the same L base
    draws. Two payloads exist:
      - kind "zvcv": an (L, J) feature matrix of Stein-operator polynomial
        features of the base noise. The conceptual per-sample CV matrix is
        block-diagonal (one feature row per parameter dimension); it is
        never materialized densely. Coefficients are per-dimension, stored
        as a (d_lambda, J) matrix.
      - kind "quad": an (L, d_lambda) matrix whose rows are
        E[grad f~(T(eps))] - grad f~(T(eps_l)), the quadratic-surrogate
        difference CV. The coefficient is a single scalar.
  * BetaCoefficients: the fitted coefficients plus the least-squares
    intercept (never added to estimates) and a provenance tag recording
    whether the coefficients came from the same samples they adjust or
    from earlier iterations ("lagged").

The adjusted estimator is mean_l (I_l + C_l beta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, dot, matvec, value_of, vsum
from .families import CapabilityError, MEAN_FIELD, RANK, RANK5, eps_values, transform
from .models import integrand_r

ZVCV = "zvcv"
QUAD = "quad"

ZVCV_ORDER2_MAX_DIM = 64


class RankDeficientError(np.linalg.LinAlgError):
    """Exact least squares requested on a rank-deficient design."""


@dataclass
class CvMatrix:
    kind: str
    values: np.ndarray   # zvcv: (L, J) features; quad: (L, d_lambda) rows
    order: int = 0

    @property
    def L(self):
        return self.values.shape[0]


@dataclass
class BetaCoefficients:
    beta: object                      # (d_lambda, J) for zvcv, scalar for quad
    alpha: np.ndarray | None = None
    provenance: str = "same_samples"


@dataclass
class QuadParams:
    """Quadratic surrogate f~(z) = b.(z - z0) + 0.5 (z - z0)' B (z - z0).

    B is stored as a diagonal vector by default; the full symmetric matrix
    is opt-in for modest d_z. z0 anchors the expansion at (an estimate of)
    the current transport mean.
    """

    b: np.ndarray
    B: np.ndarray
    z0: np.ndarray
    full: bool = False


# ---------------------------------------------------------------------------
# per-sample gradient rows


def pathwise_grad_batch(model, spec, lam, eps, batch=None):
    """L x d_lambda matrix of per-sample pathwise gradients.

    One tape evaluates the whole batch: lam is tiled to (L, d_lambda) so
    every integrand value depends only on its own parameter row, and a
    ones-seeded backward pass returns the per-row gradients.
    """
    e = eps_values(eps)
    if e.ndim != 2:
        raise ValueError("eps must be a batch (L, base_dim)")
    L = e.shape[0]
    tape = Tape()
    tiled = tape.var(np.tile(np.asarray(lam, dtype=float), (L, 1)))
    r = integrand_r(model, spec, tiled, e, batch)
    tape.backward(r, np.ones(L))
    return tiled.grad


def grad_z_batch(model, z_rows, batch=None):
    """L x d_z matrix of log-joint gradients at the given latent rows."""
    z_rows = np.asarray(z_rows, dtype=float)
    tape = Tape()
    zv = tape.var(z_rows)
    out = model.log_joint(zv, batch)
    tape.backward(out, np.ones(z_rows.shape[0]))
    return zv.grad


# ---------------------------------------------------------------------------
# Stein-operator polynomial features


def zvcv_features(eps, order=1, max_dim=ZVCV_ORDER2_MAX_DIM):
    """Second-order Langevin-Stein operator applied to polynomial test fns.

    With a standard-normal base, first-order polynomials give features
    -eps_j; order 2 appends 2 - 2 eps_i^2 per coordinate and
    -2 eps_i eps_j per pair i < j. Every feature has exact mean zero under
    the base distribution.
    """
    e = eps_values(eps)
    if order == 1:
        return -e
    if order == 2:
        d = e.shape[-1]
        if d > max_dim:
            raise CapabilityError(
                f"order-2 features need d <= {max_dim}, got {d}")
        iu, ju = np.triu_indices(d, k=1)
        sq = 2.0 - 2.0 * e ** 2
        cross = -2.0 * e[..., iu] * e[..., ju]
        return np.concatenate([-e, sq, cross], axis=-1)
    raise ValueError("feature order must be 1 or 2")


def zvcv_cv(eps, order=1):
    return CvMatrix(ZVCV, zvcv_features(eps, order), order)


# ---------------------------------------------------------------------------
# quadratic-surrogate control variate


def quad_value(params, z):
    """f~(z); dispatch-friendly (z may be a tape Var), batch-aware."""
    diff = z - params.z0
    if params.full:
        quad = dot(diff, matvec(params.B, diff))
    else:
        quad = dot(diff, diff * params.B)
    return dot(diff, params.b) + 0.5 * quad


def quad_grad_z(params, z_rows):
    """Analytic grad_z f~ = b + B (z - z0) on plain arrays."""
    diff = np.asarray(z_rows, dtype=float) - params.z0
    if params.full:
        return params.b + diff @ params.B.T
    return params.b + params.B * diff


def estimate_anchor(spec, lam, rng, n_anchor=100):
    """Monte-Carlo estimate of E T(eps; lam) from an independent batch."""
    fresh = rng.standard_normal((n_anchor, spec.base_dim))
    return np.asarray(transform(spec, value_of(lam), fresh)).mean(axis=0)


def init_quad(spec, lam, rng, full=False, n_anchor=100):
    """Zeroed surrogate anchored at the estimated transport mean."""
    d = spec.d_z
    B = np.zeros((d, d)) if full else np.zeros(d)
    return QuadParams(np.zeros(d), B, estimate_anchor(spec, lam, rng, n_anchor), full)


def quad_grad_lambda_batch(params, spec, lam, eps):
    """Per-sample rows of grad_lambda f~(T(eps_l; lam))."""
    e = eps_values(eps)
    L = e.shape[0]
    tape = Tape()
    tiled = tape.var(np.tile(np.asarray(lam, dtype=float), (L, 1)))
    out = quad_value(params, transform(spec, tiled, e))
    tape.backward(out, np.ones(L))
    return tiled.grad


def quad_expected_grad(params, spec, lam, expectation_mode="closed_form",
                       rng=None, n_expectation=100):
    """E over the base distribution of grad_lambda f~(T(eps; lam)).

    closed_form: exact Gaussian-family moments. With z = mu + A eps (A the
    family's linear map) and g(z) = b + B (z - z0):
        E d/dmu_j      = (b + B (mu - z0))_j
        E d/dlogsig_j  = B_jj sigma_j^2
        E d/dF_jk      = (B F)_jk            (rank-5 factor)
    empirical: mean over an independent n_expectation-sample batch drawn
    from `rng`; the estimator's own samples are never reused here, since
    shared draws would cancel against the difference CV.
    """
    lam = np.asarray(value_of(lam), dtype=float)
    if expectation_mode == "empirical":
        if rng is None:
            raise ValueError("empirical expectation mode needs an rng")
        fresh = rng.standard_normal((n_expectation, spec.base_dim))
        tape = Tape()
        lv = tape.var(lam)
        out = vsum(quad_value(params, transform(spec, lv, fresh)))
        tape.backward(out)
        return lv.grad / n_expectation
    if expectation_mode != "closed_form":
        raise ValueError(f"unknown expectation mode '{expectation_mode}'")
    if spec.kind not in (MEAN_FIELD, RANK5):
        raise CapabilityError(
            "closed-form surrogate expectations need a Gaussian family; "
            "use expectation_mode='empirical' for the flow")
    mu = lam[spec.layout["mu"]]
    sig = np.exp(lam[spec.layout["log_sigma"]])
    gbar = params.b + (params.B @ (mu - params.z0) if params.full
                       else params.B * (mu - params.z0))
    Bdiag = np.diag(params.B) if params.full else params.B
    d_rho = Bdiag * sig ** 2
    if spec.kind == MEAN_FIELD:
        return np.concatenate([gbar, d_rho])
    F = lam[spec.layout["factor"]].reshape(spec.d_z, RANK)
    dF = params.B @ F if params.full else Bdiag[:, None] * F
    return np.concatenate([gbar, d_rho, dF.reshape(-1)])


def quad_cv_batch(params, spec, lam, eps, expectation_mode="closed_form",
                  rng=None, n_expectation=100):
    """CvMatrix rows E[grad_lambda f~] - grad_lambda f~(T(eps_l))."""
    rows = quad_grad_lambda_batch(params, spec, lam, eps)
    ebar = quad_expected_grad(params, spec, lam, expectation_mode, rng,
                              n_expectation)
    return CvMatrix(QUAD, ebar[None, :] - rows)


def quad_update_v(params, model, spec, lam, eps, lr, rng=None,
                  n_anchor=100, batch=None):
    """One descent step fitting the surrogate's gradient field.

    Objective: (1/(2L)) sum_l || grad_z f~(z_l) - grad_z f(z_l) ||^2 at
    z_l = T(eps_l; lam). The step uses the current anchor; afterwards, if
    `rng` is given, z0 is re-estimated from an independent 100-sample batch
    for use in subsequent iterations (b is not re-anchored, so the fitted
    linear field shifts with the anchor exactly as in the lagged protocol).
    With lr = 0 and rng = None the params are returned unchanged.
    """
    e = eps_values(eps)
    L = e.shape[0]
    z = np.asarray(transform(spec, np.asarray(value_of(lam), dtype=float), e))
    resid = quad_grad_z(params, z) - grad_z_batch(model, z, batch)
    diff = z - params.z0
    new_b = params.b - lr * resid.mean(axis=0)
    if params.full:
        gB = resid.T @ diff / L
        new_B = params.B - lr * 0.5 * (gB + gB.T)   # keep B symmetric
    else:
        new_B = params.B - lr * (resid * diff).mean(axis=0)
    z0 = params.z0 if rng is None else estimate_anchor(spec, lam, rng, n_anchor)
    return QuadParams(new_b, new_B, z0, params.full)


# ---------------------------------------------------------------------------
# coefficient solvers


def _check_cv(grad_batch, cvm):
    I = np.asarray(grad_batch, dtype=float)
    if I.shape[0] != cvm.values.shape[0]:
        raise ValueError("gradient batch and CV matrix disagree on L")
    return I


def solve_beta_gd(grad_batch, cvm, lr=1e-3, steps=4):
    """Plain gradient descent on the joint least-squares objective.

    Objective: (1/L) sum_l || I_l + alpha + C_l beta ||^2, initialized at
    alpha = -mean(I), beta = 0, so zero steps reproduce the unadjusted
    estimator. Coefficients stay tied to the samples that produced them.
    """
    I = _check_cv(grad_batch, cvm)
    L = I.shape[0]
    alpha = -I.mean(axis=0)
    if cvm.kind == ZVCV:
        phi = cvm.values
        B = np.zeros((I.shape[1], phi.shape[1]))
        for _ in range(steps):
            R = I + alpha + phi @ B.T
            g_alpha = 2.0 * R.mean(axis=0)
            g_B = (2.0 / L) * R.T @ phi
            alpha = alpha - lr * g_alpha
            B = B - lr * g_B
        return BetaCoefficients(B, alpha)
    C = cvm.values
    beta = 0.0
    for _ in range(steps):
        R = I + alpha + beta * C
        g_alpha = 2.0 * R.mean(axis=0)
        g_beta = (2.0 / L) * float(np.sum(R * C))
        alpha = alpha - lr * g_alpha
        beta = beta - lr * g_beta
    return BetaCoefficients(float(beta), alpha)


def solve_beta_ols(grad_batch, cvm, ridge=0.0):
    """Exact minimizer of the least-squares objective (+ ridge on beta)."""
    I = _check_cv(grad_batch, cvm)
    L = I.shape[0]
    if cvm.kind == ZVCV:
        phi = cvm.values
        A = np.concatenate([np.ones((L, 1)), phi], axis=1)
        if ridge == 0.0 and np.linalg.matrix_rank(A) < A.shape[1]:
            raise RankDeficientError(
                f"design is rank-deficient (L={L}, features={phi.shape[1]}); "
                "add ridge or more samples")
        reg = ridge * np.eye(A.shape[1])
        reg[0, 0] = 0.0            # intercept is not penalized
        theta = np.linalg.solve(A.T @ A + reg, A.T @ (-I))
        return BetaCoefficients(theta[1:].T, theta[0])
    C = cvm.values
    c_bar = C.mean(axis=0)
    i_bar = I.mean(axis=0)
    Ct = C - c_bar
    It = I - i_bar
    denom = float(np.sum(Ct * Ct)) + ridge
    if denom == 0.0:
        raise RankDeficientError("constant CV columns admit no unique beta")
    beta = -float(np.sum(Ct * It)) / denom
    return BetaCoefficients(beta, -i_bar - beta * c_bar)


def solve_beta_esn(grad_batch, cvm):
    """Expected-squared-norm minimizer beta* = -E[C'C]^{-1} E[C'I].

    Empirical moments over the batch; no intercept. For the zvcv payload
    the block structure makes E[C'C] block-diagonal with identical feature
    Gram blocks, so one J x J solve serves every parameter dimension.
    """
    I = _check_cv(grad_batch, cvm)
    L = I.shape[0]
    if cvm.kind == ZVCV:
        phi = cvm.values
        M = phi.T @ phi / L
        rhs = phi.T @ I / L
        try:
            B = -np.linalg.solve(M, rhs).T
        except np.linalg.LinAlgError:
            raise RankDeficientError("feature Gram matrix is singular") from None
        return BetaCoefficients(B)
    C = cvm.values
    denom = float(np.sum(C * C))
    if denom == 0.0:
        raise RankDeficientError("CV rows are identically zero")
    return BetaCoefficients(-float(np.sum(C * I)) / denom)


# ---------------------------------------------------------------------------
# applying coefficients


def cv_adjustments(cvm, beta):
    """L x d_lambda rows C_l beta (no intercept)."""
    if cvm.kind == ZVCV:
        return cvm.values @ np.asarray(beta.beta).T
    return float(beta.beta) * cvm.values


def cv_adjusted_estimate(grad_batch, cvm=None, beta=None):
    """mean_l (I_l + C_l beta); the LS intercept alpha is never added."""
    I = np.asarray(grad_batch, dtype=float)
    if cvm is None:
        return I.mean(axis=0)
    return (I + cv_adjustments(cvm, beta)).mean(axis=0)


def variance_pairwise(grad_batch, cvm=None, beta=None):
    """Pairwise U-statistic (1/(L(L-1))) sum_{l>l'} ||a_l - a_l'||^2.

    Computed in its algebraically equal trace form, the unbiased sample
    variance summed over coordinates.
    """
    a = np.asarray(grad_batch, dtype=float)
    if cvm is not None:
        a = a + cv_adjustments(cvm, beta)
    if a.shape[0] < 2:
        raise ValueError("need at least two samples for a pairwise variance")
    return float(a.var(axis=0, ddof=1).sum())


# ---------------------------------------------------------------------------
# estimator strategies (state + per-iteration protocol)


class NoCvEstimator:
    """Plain Monte-Carlo mean of the pathwise gradient rows."""

    name = "nocv"

    def start(self, model, spec, lam, rng):
        pass

    def step(self, model, spec, lam, eps, batch=None, expect_rng=None,
             anchor_rng=None):
        return pathwise_grad_batch(model, spec, lam, eps, batch).mean(axis=0)

    def vr_adjust(self, model, spec, lam, grad_batch, eps, rng=None):
        return np.asarray(grad_batch).mean(axis=0)


class ZvcvGdEstimator:
    """Stein-feature CV with per-dimension coefficients fit by inner GD.

    Coefficients are re-fit on each batch from the same samples they
    adjust (the biased protocol); nothing persists across iterations.
    """

    name = "zvcv_gd"

    def __init__(self, order=1, inner_lr=1e-3, inner_steps=4):
        self.order = order
        self.inner_lr = inner_lr
        self.inner_steps = inner_steps
        self.last_beta = None

    def start(self, model, spec, lam, rng):
        pass

    def step(self, model, spec, lam, eps, batch=None, expect_rng=None,
             anchor_rng=None):
        gb = pathwise_grad_batch(model, spec, lam, eps, batch)
        return self.vr_adjust(model, spec, lam, gb, eps)

    def vr_adjust(self, model, spec, lam, grad_batch, eps, rng=None):
        cvm = zvcv_cv(eps, self.order)
        beta = solve_beta_gd(grad_batch, cvm, self.inner_lr, self.inner_steps)
        self.last_beta = beta
        return cv_adjusted_estimate(grad_batch, cvm, beta)


class QuadCvEstimator:
    """Difference CV from a quadratic surrogate of the log-joint.

    Per iteration: adjust with the coefficient fitted on *earlier*
    iterations' samples (lagged; zero at the start), then refresh the
    scalar coefficient from this batch and take one surrogate descent
    step. Anchor and expectation batches come from their own streams.
    """

    name = "quadcv"

    def __init__(self, expectation_mode="closed_form", gamma_v=0.01,
                 full_matrix=False, n_expectation=100, n_anchor=100):
        self.expectation_mode = expectation_mode
        self.gamma_v = gamma_v
        self.full_matrix = full_matrix
        self.n_expectation = n_expectation
        self.n_anchor = n_anchor
        self.params = None
        self.beta = BetaCoefficients(0.0, None, provenance="lagged")

    def start(self, model, spec, lam, rng):
        self.params = init_quad(spec, lam, rng, self.full_matrix, self.n_anchor)
        self.beta = BetaCoefficients(0.0, None, provenance="lagged")

    def step(self, model, spec, lam, eps, batch=None, expect_rng=None,
             anchor_rng=None):
        if self.params is None:
            raise RuntimeError("call start() before stepping")
        gb = pathwise_grad_batch(model, spec, lam, eps, batch)
        cvm = quad_cv_batch(self.params, spec, lam, eps,
                            self.expectation_mode, expect_rng,
                            self.n_expectation)
        ghat = cv_adjusted_estimate(gb, cvm, self.beta)
        try:
            fresh = solve_beta_esn(gb, cvm)
            self.beta = BetaCoefficients(fresh.beta, None, provenance="lagged")
        except RankDeficientError:
            # a zeroed surrogate yields an identically-zero CV (iteration 0);
            # any coefficient is equivalent there, so keep the current one
            pass
        self.params = quad_update_v(self.params, model, spec, lam, eps,
                                    self.gamma_v, anchor_rng, self.n_anchor,
                                    batch)
        return ghat

    def vr_adjust(self, model, spec, lam, grad_batch, eps, rng=None):
        cvm = quad_cv_batch(self.params, spec, lam, eps,
                            self.expectation_mode, rng, self.n_expectation)
        return cv_adjusted_estimate(grad_batch, cvm, self.beta)


def make_estimator(name, **kw):
    if name == NoCvEstimator.name:
        return NoCvEstimator()
    if name == ZvcvGdEstimator.name:
        allowed = {k: kw[k] for k in ("order", "inner_lr", "inner_steps") if k in kw}
        return ZvcvGdEstimator(**allowed)
    if name == QuadCvEstimator.name:
        allowed = {k: kw[k] for k in ("expectation_mode", "gamma_v",
                                      "full_matrix", "n_expectation",
                                      "n_anchor") if k in kw}
        return QuadCvEstimator(**allowed)
    raise ValueError(f"unknown estimator '{name}'")
