"""Target models: datasets, parsers, synthetic generators, log-joints.

Every model exposes the same small surface:

  * ``d_z``            latent dimension,
  * ``log_joint(z, batch=None)``   unnormalized log p(x, z), batch-aware in
    z's leading axes and written against the autodiff dispatch ops so it
    runs on arrays and tape Vars alike; ``batch`` is a Minibatch whose
    likelihood sum is rescaled by N/B,
  * ``minibatch(size, rng)``,
  * ``test_loglik(z_rows)``        per-(sample, test point) log-likelihood
    matrix for predictive evaluation (models with a test split).

Loaders return everything in the train split; callers carve out test splits
with the split helpers so the synthetic generators can round-trip through
the same parsers the real files use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .autodiff import exp, matmul, matvec, reshape, softplus, square, relu, \
    transpose_last, vsum

LOG_2PI = float(np.log(2.0 * np.pi))

LOGISTIC = "logistic_a1a"
FRISK = "hier_poisson_frisk"
BNN = "bnn_redwine"
TOY = "toy_conjugate"
MODEL_KINDS = (LOGISTIC, FRISK, BNN, TOY)


class ParseError(ValueError):
    """Malformed input text; message carries the 1-based line number."""


class SchemaError(ValueError):
    """Parsed fine but violates the dataset's shape contract."""


@dataclass
class Dataset:
    features: np.ndarray          # N x p dense
    targets: np.ndarray           # N
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.features.shape[0]


@dataclass
class Minibatch:
    indices: np.ndarray
    scale: float                  # N_train / B


# ---------------------------------------------------------------------------
# parsers


def parse_libsvm(text):
    """Sparse classification rows ``label idx:val ...`` into a dense Dataset.

    Labels must be +-1 (mapped to 1/0); indices are 1-based and strictly
    increasing per line; matrix width is the maximum index seen.
    """
    rows, labels = [], []
    width = 0
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        toks = line.split()
        if toks[0] in ("+1", "1"):
            labels.append(1.0)
        elif toks[0] == "-1":
            labels.append(0.0)
        else:
            raise ParseError(f"line {ln}: label must be +1 or -1, got '{toks[0]}'")
        entries = []
        prev = 0
        for tok in toks[1:]:
            try:
                idx_s, val_s = tok.split(":", 1)
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(f"line {ln}: malformed feature token '{tok}'") from None
            if idx <= prev:
                raise ParseError(f"line {ln}: indices must be strictly increasing 1-based")
            prev = idx
            entries.append((idx, val))
        width = max(width, prev)
        rows.append(entries)
    if not rows:
        raise ParseError("line 1: no data rows")
    X = np.zeros((len(rows), width))
    for i, entries in enumerate(rows):
        for idx, val in entries:
            X[i, idx - 1] = val
    n = len(rows)
    return Dataset(X, np.asarray(labels), np.arange(n), np.arange(0),
                   meta={"format": "libsvm"})


def load_frisk_csv(text, arrest_scale=15.0):
    """Stop counts by ethnicity-group x precinct cell.

    Expects header ``eth,precinct,stops,arrests`` and exactly 96 rows
    jointly covering 2 ethnicity groups and 32 precincts (cells may
    repeat). The exposure offset per row is arrests / arrest_scale and is
    stored in meta["log_exposure"].
    """
    lines = [l.strip() for l in text.splitlines() if l.strip()]
    if not lines or [c.strip() for c in lines[0].split(",")] != ["eth", "precinct", "stops", "arrests"]:
        raise ParseError("line 1: expected header 'eth,precinct,stops,arrests'")
    recs = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"line {ln}: expected 4 comma-separated fields")
        try:
            eth, prec, stops, arrests = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"line {ln}: fields must be integers") from None
        if stops < 0 or arrests <= 0:
            raise ParseError(f"line {ln}: stops must be >= 0 and arrests > 0")
        recs.append((eth, prec, stops, arrests))
    eths = sorted({r[0] for r in recs})
    precs = sorted({r[1] for r in recs})
    if eths != [1, 2] or precs != list(range(1, 33)) or len(recs) != 96:
        raise SchemaError(
            f"expected 96 rows over 2 ethnicity groups and 32 precincts, got "
            f"{len(eths)} groups, {len(precs)} precincts, {len(recs)} rows")
    X = np.array([[r[0] - 1, r[1] - 1] for r in recs], dtype=float)
    y = np.array([r[2] for r in recs], dtype=float)
    arrests = np.array([r[3] for r in recs], dtype=float)
    n = len(recs)
    return Dataset(X, y, np.arange(n), np.arange(0),
                   meta={"format": "frisk",
                         "arrest_scale": float(arrest_scale),
                         "log_exposure": np.log(arrests / arrest_scale)})


def load_redwine_csv(text):
    """Wine-quality table: 11 numeric features then the quality score.

    Accepts comma or semicolon separators (the published file uses ';').
    """
    lines = [l.strip() for l in text.splitlines() if l.strip()]
    if not lines:
        raise ParseError("line 1: empty file")
    sep = ";" if ";" in lines[0] else ","
    header = [h.strip().strip('"') for h in lines[0].split(sep)]
    if len(header) != 12 or header[-1] != "quality":
        raise ParseError("line 1: expected 11 feature columns plus 'quality'")
    X, y = [], []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(sep)
        if len(parts) != 12:
            raise ParseError(f"line {ln}: expected 12 fields")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"line {ln}: fields must be numeric") from None
        X.append(vals[:-1])
        y.append(vals[-1])
    n = len(X)
    return Dataset(np.asarray(X), np.asarray(y), np.arange(n), np.arange(0),
                   meta={"format": "redwine", "feature_names": header[:-1]})


def split_train_test(ds, test_frac, rng):
    """Random disjoint train/test split over all rows."""
    perm = rng.permutation(ds.n)
    n_test = int(round(ds.n * test_frac))
    return Dataset(ds.features, ds.targets,
                   np.sort(perm[n_test:]), np.sort(perm[:n_test]), dict(ds.meta))


def take_disjoint_subsets(ds, n_each, rng):
    """Two disjoint size-n_each subsets as (train, test), for full-batch runs."""
    if 2 * n_each > ds.n:
        raise SchemaError(f"need {2 * n_each} rows for disjoint subsets, have {ds.n}")
    perm = rng.permutation(ds.n)
    return Dataset(ds.features, ds.targets,
                   np.sort(perm[:n_each]), np.sort(perm[n_each:2 * n_each]),
                   dict(ds.meta))


# ---------------------------------------------------------------------------
# synthetic generators (emit the same text formats the parsers read)


def synth_libsvm_text(rng, n=60, p=8):
    w = rng.normal(size=p + 1)
    lines = []
    for _ in range(n):
        mask = rng.random(p) < 0.7
        x = np.where(mask, np.round(rng.normal(size=p), 6), 0.0)
        prob = 1.0 / (1.0 + np.exp(-(w[0] + x @ w[1:])))
        lab = "+1" if rng.random() < prob else "-1"
        toks = [lab] + [f"{j + 1}:{x[j]:.6g}" for j in range(p) if mask[j]]
        lines.append(" ".join(toks))
    # force full width so parsed p is deterministic
    if not any(l.endswith(f"{p}:1") or f" {p}:" in l for l in lines):
        lines[0] += f" {p}:1"
    return "\n".join(lines) + "\n"


def synth_frisk_text(rng):
    # 96 rows covering 2 ethnicity groups x 32 precincts; cells may repeat
    mu = -1.0
    alpha = rng.normal(0.0, 0.4, size=2)
    beta = rng.normal(0.0, 0.6, size=32)
    cells = [(e, p) for e in range(2) for p in range(32)]
    cells += [(p % 2, p) for p in range(32)]
    lines = ["eth,precinct,stops,arrests"]
    for e, p in cells:
        arrests = int(rng.integers(30, 3000))
        rate = np.exp(mu + alpha[e] + beta[p] + np.log(arrests / 15.0))
        stops = int(rng.poisson(rate))
        lines.append(f"{e + 1},{p + 1},{stops},{arrests}")
    return "\n".join(lines) + "\n"


def synth_redwine_text(rng, n=80):
    names = ["fixed acidity", "volatile acidity", "citric acid", "residual sugar",
             "chlorides", "free sulfur dioxide", "total sulfur dioxide", "density",
             "pH", "sulphates", "alcohol"]
    w = rng.normal(size=11)
    lines = [";".join(f'"{h}"' for h in names + ["quality"])]
    for _ in range(n):
        x = rng.normal(size=11)
        q = np.clip(np.round(5.5 + x @ w * 0.4 + rng.normal() * 0.5), 3, 8)
        lines.append(";".join(f"{v:.6g}" for v in x) + f";{int(q)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# models


def _gauss_prior(z_block, var):
    """Independent N(0, var) log-density summed over the last axis."""
    d = z_block.shape[-1]
    return -0.5 * vsum(square(z_block), axis=-1) / var \
        - 0.5 * d * (LOG_2PI + np.log(var))


class _ModelBase:
    has_test = False

    def minibatch(self, size, rng):
        ids = self.dataset.train_idx
        if size <= 0 or size > ids.size:
            raise ValueError(f"minibatch size must be in 1..{ids.size}")
        pick = rng.choice(ids.size, size=size, replace=False)
        return Minibatch(ids[np.sort(pick)], ids.size / size)

    def _batch_rows(self, batch):
        if batch is None:
            return self.dataset.train_idx, 1.0
        return batch.indices, batch.scale


class LogisticRegressionModel(_ModelBase):
    """Bayesian logistic regression; z = (intercept, weights), N(0, 10^2) prior."""

    kind = LOGISTIC

    def __init__(self, dataset, prior_std=10.0):
        self.dataset = dataset
        self.p = dataset.features.shape[1]
        self.d_z = self.p + 1
        self.prior_var = prior_std ** 2
        self.has_test = dataset.test_idx.size > 0

    def _logits(self, z, X):
        w0 = z[..., 0:1]
        w = z[..., 1:]
        return matvec(X, w) + w0

    def log_joint(self, z, batch=None):
        rows, scale = self._batch_rows(batch)
        X = self.dataset.features[rows]
        y = self.dataset.targets[rows]
        eta = self._logits(z, X)
        ll = vsum(y * eta - softplus(eta), axis=-1)
        return scale * ll + _gauss_prior(z, self.prior_var)

    def test_loglik(self, z_rows):
        X = self.dataset.features[self.dataset.test_idx]
        y = self.dataset.targets[self.dataset.test_idx]
        eta = self._logits(np.asarray(z_rows), X)
        return y * eta - np.logaddexp(0.0, eta)


class HierarchicalPoissonModel(_ModelBase):
    """Two-level Poisson rates over ethnicity-group and precinct effects.

    z = (alpha_1..2, beta_1..32, mu, log sig_alpha, log sig_beta), d_z = 37.
    log rate per cell = mu + alpha_e + beta_p + log exposure.
    """

    kind = FRISK

    def __init__(self, dataset, prior_std=10.0):
        self.dataset = dataset
        eth = dataset.features[:, 0].astype(int)
        prec = dataset.features[:, 1].astype(int)
        self.n_eth = eth.max() + 1
        self.n_prec = prec.max() + 1
        self.d_z = self.n_eth + self.n_prec + 3
        self.E_eth = np.eye(self.n_eth)[eth]      # one-hot gathers keep the
        self.E_prec = np.eye(self.n_prec)[prec]   # tape in plain matvecs
        self.log_exposure = dataset.meta["log_exposure"]
        self.prior_var = prior_std ** 2
        self._lgamma_y = gammaln(dataset.targets + 1.0)

    def log_joint(self, z, batch=None):
        rows, scale = self._batch_rows(batch)
        a_end = self.n_eth
        b_end = self.n_eth + self.n_prec
        alpha = z[..., 0:a_end]
        beta = z[..., a_end:b_end]
        mu = z[..., b_end:b_end + 1]
        lsa = z[..., b_end + 1]
        lsb = z[..., b_end + 2]
        eta = matvec(self.E_eth[rows], alpha) + matvec(self.E_prec[rows], beta) \
            + mu + self.log_exposure[rows]
        y = self.dataset.targets[rows]
        ll = vsum(y * eta - exp(eta), axis=-1) - self._lgamma_y[rows].sum()
        hyper = _gauss_prior(z[..., b_end:], self.prior_var)
        walk_a = -0.5 * exp(-2.0 * lsa) * vsum(square(alpha), axis=-1) \
            - self.n_eth * lsa - 0.5 * self.n_eth * LOG_2PI
        walk_b = -0.5 * exp(-2.0 * lsb) * vsum(square(beta), axis=-1) \
            - self.n_prec * lsb - 0.5 * self.n_prec * LOG_2PI
        return scale * ll + hyper + walk_a + walk_b

    def test_loglik(self, z_rows):
        raise SchemaError("this dataset has no test split")


class BayesianMlpModel(_ModelBase):
    """One-hidden-layer ReLU regression network with learned noise scales.

    z = (log alpha^2, log tau^2, weights); weights carry a N(0, alpha^2)
    prior, the two log-scales carry flat (improper) priors contributing a
    constant 0. Features are standardized with train-split statistics.
    """

    kind = BNN

    def __init__(self, dataset, hidden=50):
        self.dataset = dataset
        self.hidden = hidden
        self.p = dataset.features.shape[1]
        self.n_weights = (self.p + 1) * hidden + hidden + 1
        self.d_z = self.n_weights + 2
        self.has_test = dataset.test_idx.size > 0
        tr = dataset.features[dataset.train_idx]
        self._x_mean = tr.mean(axis=0)
        self._x_std = tr.std(axis=0)
        self._x_std[self._x_std == 0] = 1.0
        dataset.meta["x_mean"] = self._x_mean
        dataset.meta["x_std"] = self._x_std
        self._X = (dataset.features - self._x_mean) / self._x_std

    def _predict(self, z, X):
        h, p = self.hidden, self.p
        w = z[..., 2:]
        W1 = reshape(w[..., : h * p], tuple(w.shape[:-1]) + (h, p))
        b1 = reshape(w[..., h * p: h * p + h], tuple(w.shape[:-1]) + (1, h))
        w2 = w[..., h * p + h: h * p + 2 * h]
        b2 = w[..., h * p + 2 * h: h * p + 2 * h + 1]
        hid = relu(matmul(X, transpose_last(W1)) + b1)
        return matvec(hid, w2) + b2

    def log_joint(self, z, batch=None):
        rows, scale = self._batch_rows(batch)
        X = self._X[rows]
        y = self.dataset.targets[rows]
        la = z[..., 0]
        lt = z[..., 1]
        phi = self._predict(z, X)
        resid = vsum(square(y - phi), axis=-1)
        n_b = rows.size
        ll = -0.5 * exp(-lt) * resid - 0.5 * n_b * lt - 0.5 * n_b * LOG_2PI
        w = z[..., 2:]
        prior_w = -0.5 * exp(-la) * vsum(square(w), axis=-1) \
            - 0.5 * self.n_weights * la - 0.5 * self.n_weights * LOG_2PI
        return scale * ll + prior_w  # flat priors on la, lt add 0

    def test_loglik(self, z_rows):
        z_rows = np.asarray(z_rows)
        X = self._X[self.dataset.test_idx]
        y = self.dataset.targets[self.dataset.test_idx]
        phi = self._predict(z_rows, X)
        lt = z_rows[..., 1:2]
        return -0.5 * np.exp(-lt) * (y - phi) ** 2 - 0.5 * lt - 0.5 * LOG_2PI


class ConjugateGaussianModel(_ModelBase):
    """N(0, s0^2) prior on a scalar mean, N(z, tau^2) observations.

    Closed-form posterior and evidence make this the end-to-end oracle.
    """

    kind = TOY

    def __init__(self, obs=(), test_obs=(), prior_var=1.0, lik_var=1.0):
        obs = np.asarray(obs, dtype=float).ravel()
        test = np.asarray(test_obs, dtype=float).ravel()
        feats = np.concatenate([obs, test])[:, None]
        self.dataset = Dataset(feats, feats[:, 0],
                               np.arange(obs.size),
                               np.arange(obs.size, obs.size + test.size),
                               meta={"format": "toy"})
        self.d_z = 1
        self.prior_var = float(prior_var)
        self.lik_var = float(lik_var)
        self.has_test = test.size > 0

    def log_joint(self, z, batch=None):
        rows, scale = self._batch_rows(batch)
        x = self.dataset.targets[rows]
        m = z[..., 0:1]
        ll = vsum(-0.5 * square(x - m) / self.lik_var, axis=-1) \
            - 0.5 * rows.size * (LOG_2PI + np.log(self.lik_var))
        prior = -0.5 * vsum(square(z), axis=-1) / self.prior_var \
            - 0.5 * (LOG_2PI + np.log(self.prior_var))
        return scale * ll + prior

    def posterior_mean_var(self):
        x = self.dataset.targets[self.dataset.train_idx]
        prec = 1.0 / self.prior_var + x.size / self.lik_var
        var = 1.0 / prec
        return var * x.sum() / self.lik_var, var

    def log_evidence(self):
        x = self.dataset.targets[self.dataset.train_idx]
        n = x.size
        cov = self.lik_var * np.eye(n) + self.prior_var * np.ones((n, n))
        sign, ld = np.linalg.slogdet(cov)
        return float(-0.5 * x @ np.linalg.solve(cov, x) - 0.5 * ld - 0.5 * n * LOG_2PI)

    def test_loglik(self, z_rows):
        y = self.dataset.targets[self.dataset.test_idx]
        m = np.asarray(z_rows)[..., 0:1]
        return -0.5 * (y - m) ** 2 / self.lik_var - 0.5 * (LOG_2PI + np.log(self.lik_var))


def make_model(kind, dataset=None, **kw):
    if kind == LOGISTIC:
        return LogisticRegressionModel(dataset, **kw)
    if kind == FRISK:
        return HierarchicalPoissonModel(dataset, **kw)
    if kind == BNN:
        return BayesianMlpModel(dataset, **kw)
    if kind == TOY:
        return ConjugateGaussianModel(**kw)
    raise ValueError(f"unknown model kind '{kind}'")


def integrand_r(model, spec, lam, eps, batch=None):
    """Minibatch evidence-bound integrand r(z; lam) at z = T(eps; lam).

    r = (N/B) * batch log-likelihood + log prior - log q(z; lam); gradients
    w.r.t. lam flow through both the sample path and log q's direct
    parameter dependence.
    """
    from .families import log_density, transform
    z = transform(spec, lam, eps)
    return model.log_joint(z, batch) - log_density(spec, lam, z)
