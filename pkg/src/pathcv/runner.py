"""Experiment orchestration: configuration, Adam ascent loop, trace
emission, and checkpointing.

Every random draw comes from a deterministically derived substream keyed by
(seed, repetition, purpose, iteration), so trace values are bitwise
reproducible for a given config (wall-clock excepted) and repetitions are
mutually independent.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import NumericError
from .cv import RankDeficientError, make_estimator
from .evaluate import test_lppd, variance_ratio, eval_elbo
from .families import (
    CapabilityError,
    FAMILY_KINDS,
    REAL_NVP,
    init_params,
    make_family,
)
from .models import (
    BNN,
    FRISK,
    LOGISTIC,
    MODEL_KINDS,
    TOY,
    Dataset,
    load_frisk_csv,
    load_redwine_csv,
    make_model,
    parse_libsvm,
    split_train_test,
)

TRACE_HEADER = ("run_id,repetition,iteration,wall_ms,elbo,variance_ratio,"
                "test_lppd,estimator,family,model,num_samples,seed")

ESTIMATOR_NAMES = ("nocv", "zvcv_gd", "quadcv")

# substream purposes; the leaf rng is default_rng([seed, rep, purpose, iter])
INIT, EPS, MINIBATCH, ANCHOR, EXPECT, EVAL, VR, LPPD, VR_EXPECT, SPLIT = range(10)

DEFAULT_ITERATIONS = {LOGISTIC: 5000, FRISK: 5000, TOY: 5000, BNN: 10000}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = ""
    family: str = ""
    estimator: str = ""
    num_samples: int = 10
    iterations: int = 0           # 0 -> model-dependent default
    eval_every: int = 50
    vr_every: int = 50
    repetitions: int = 5
    seed: int = 0
    gamma_lambda: float = 0.01
    # estimator hyperparameters
    order: int = 1
    inner_lr: float = 1e-3
    inner_steps: int = 4
    gamma_v: float = 0.01
    expectation_mode: str = "closed_form"
    full_matrix: bool = False
    # data
    dataset_path: str = ""
    test_path: str = ""
    test_fraction: float = 0.0
    batch_size: int = 0           # 0 -> full batch
    bnn_hidden: int = 50
    toy_obs: str = "0.0"
    toy_test_obs: str = ""
    # evaluation budgets
    eval_samples: int = 500
    vr_replicates: int = 100
    lppd_samples: int = 1000
    quad_warmup_iters: int = 200
    out_dir: str = "runs"


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _coerce(key, text, target_type):
    try:
        if target_type is bool:
            return _BOOL_WORDS[text.strip().lower()]
        if target_type is int:
            return int(text.strip())
        if target_type is float:
            return float(text.strip())
        return text.strip()
    except (KeyError, ValueError):
        raise ConfigError(f"config key '{key}': cannot parse "
                          f"'{text.strip()}' as {target_type.__name__}") from None


def parse_config(text, **overrides):
    """key = value lines ('#' comments, blanks ignored) into a RunConfig."""
    concrete = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    got = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in concrete:
            raise ConfigError(f"unknown config key '{key}'")
        got[key] = _coerce(key, val, concrete[key])
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in concrete:
            raise ConfigError(f"unknown config key '{key}'")
        got[key] = _coerce(key, str(val), concrete[key])
    return RunConfig(**got)


def load_config(path, **overrides):
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(parse_config(fh.read(), **overrides))


def validate_config(cfg):
    """Fill model-dependent defaults and reject inconsistent settings."""
    if cfg.model not in MODEL_KINDS:
        raise ConfigError(f"config key 'model': unknown kind '{cfg.model}'")
    if cfg.family not in FAMILY_KINDS:
        raise ConfigError(f"config key 'family': unknown kind '{cfg.family}'")
    if cfg.estimator not in ESTIMATOR_NAMES:
        raise ConfigError(
            f"config key 'estimator': unknown estimator '{cfg.estimator}'")
    if cfg.iterations == 0:
        cfg = replace(cfg, iterations=DEFAULT_ITERATIONS[cfg.model])
    for key in ("num_samples", "iterations", "eval_every", "vr_every",
                "repetitions"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"config key '{key}': must be >= 1")
    if cfg.gamma_lambda <= 0:
        raise ConfigError("gamma_lambda must be positive")
    if cfg.gamma_v <= 0:
        raise ConfigError("gamma_v must be positive")
    if cfg.order not in (1, 2):
        raise ConfigError("config key 'order': must be 1 or 2")
    if cfg.expectation_mode not in ("closed_form", "empirical"):
        raise ConfigError(
            f"config key 'expectation_mode': unknown mode '{cfg.expectation_mode}'")
    if (cfg.estimator == "quadcv" and cfg.family == REAL_NVP
            and cfg.expectation_mode == "closed_form"):
        raise ConfigError(
            "closed-form surrogate expectations need the mean and covariance "
            "of the variational family; the flow has neither in closed form. "
            "Set expectation_mode = empirical.")
    if cfg.model != TOY and not cfg.dataset_path:
        raise ConfigError(f"config key 'dataset_path': required for model "
                          f"'{cfg.model}'")
    if not 0.0 <= cfg.test_fraction < 1.0:
        raise ConfigError("config key 'test_fraction': must be in [0, 1)")
    if cfg.batch_size < 0:
        raise ConfigError("config key 'batch_size': must be >= 0")
    return cfg


# ---------------------------------------------------------------------------
# data / model assembly


def _parse_floats(text):
    return [float(tok) for tok in text.replace(",", " ").split()]


def _merge_test(train, test):
    width = max(train.features.shape[1], test.features.shape[1])

    def pad(X):
        if X.shape[1] == width:
            return X
        out = np.zeros((X.shape[0], width))
        out[:, :X.shape[1]] = X
        return out

    X = np.concatenate([pad(train.features), pad(test.features)])
    y = np.concatenate([train.targets, test.targets])
    n_train = train.features.shape[0]
    return Dataset(X, y, np.arange(n_train),
                   np.arange(n_train, n_train + test.features.shape[0]),
                   dict(train.meta))


def build_model(cfg):
    if cfg.model == TOY:
        return make_model(TOY, obs=_parse_floats(cfg.toy_obs),
                          test_obs=_parse_floats(cfg.toy_test_obs))
    with open(cfg.dataset_path, "r", encoding="utf-8") as fh:
        text = fh.read()
    loaders = {LOGISTIC: parse_libsvm, FRISK: load_frisk_csv,
               BNN: load_redwine_csv}
    ds = loaders[cfg.model](text)
    if cfg.test_path:
        with open(cfg.test_path, "r", encoding="utf-8") as fh:
            ds = _merge_test(ds, loaders[cfg.model](fh.read()))
    elif cfg.test_fraction > 0.0:
        ds = split_train_test(ds, cfg.test_fraction, _stream(cfg.seed, 0, SPLIT))
    if cfg.model == BNN:
        return make_model(BNN, ds, hidden=cfg.bnn_hidden)
    return make_model(cfg.model, ds)


def _stream(seed, rep, purpose, iteration=0):
    return np.random.default_rng([seed, rep, purpose, iteration])


def build_estimator(cfg):
    return make_estimator(cfg.estimator, order=cfg.order,
                          inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps,
                          expectation_mode=cfg.expectation_mode,
                          gamma_v=cfg.gamma_v, full_matrix=cfg.full_matrix)


# ---------------------------------------------------------------------------
# Adam (ascent)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, d, lr):
        return cls(np.zeros(d), np.zeros(d), 0, lr)


def adam_step(state, lam, g, iteration=0):
    """Bias-corrected Adam applied as ascent: lam + lr * mhat/(sqrt(vhat)+e)."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient estimate at iteration {iteration}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new_lam = lam + state.lr * mhat / (np.sqrt(vhat) + state.eps_hat)
    return replace(state, m=m, v=v, t=t), new_lam


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, lam, family_kind):
    lam = np.asarray(lam, dtype=float)
    with open(path, "wb") as fh:
        fh.write(f"d_lambda={lam.size} family={family_kind}\n".encode("utf-8"))
        fh.write(lam.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8", errors="replace").strip()
        payload = fh.read()
    parts = header.split()
    if (len(parts) != 2 or not parts[0].startswith("d_lambda=")
            or not parts[1].startswith("family=")):
        raise CheckpointError(
            f"malformed checkpoint header {header!r}; expected "
            "'d_lambda=<n> family=<kind>'")
    try:
        d = int(parts[0].split("=", 1)[1])
    except ValueError:
        raise CheckpointError(f"malformed checkpoint header {header!r}") from None
    kind = parts[1].split("=", 1)[1]
    lam = np.frombuffer(payload, dtype="<f8")
    if lam.size != d:
        raise CheckpointError(
            f"checkpoint payload holds {lam.size} values, header says {d}")
    return lam.copy(), kind


# ---------------------------------------------------------------------------
# the experiment loop


def _run_id(cfg):
    return (f"{cfg.model}-{cfg.family}-{cfg.estimator}"
            f"-L{cfg.num_samples}-seed{cfg.seed}")


def _fmt(x):
    return format(float(x), ".17g")


def _eval_row(cfg, model, spec, lam, est, rep, it, wall_ms, run_id):
    rng_eval = _stream(cfg.seed, rep, EVAL, it)
    elbo = eval_elbo(model, spec, lam, rng_eval, cfg.eval_samples).value
    vr = ""
    if it % cfg.vr_every == 0:
        rep_vr = variance_ratio(
            model, spec, lam, est, _stream(cfg.seed, rep, VR, it),
            n_samples=cfg.num_samples, n_replicates=cfg.vr_replicates,
            expect_rng=_stream(cfg.seed, rep, VR_EXPECT, it), iteration=it)
        vr = _fmt(rep_vr.ratio)
    lppd = ""
    if model.dataset.test_idx.size > 0:
        lppd = _fmt(test_lppd(model, spec, lam,
                              _stream(cfg.seed, rep, LPPD, it),
                              cfg.lppd_samples))
    return [run_id, rep, it, f"{wall_ms:.3f}", _fmt(elbo), vr, lppd,
            cfg.estimator, cfg.family, cfg.model, cfg.num_samples, cfg.seed]


def _failure_row(cfg, rep, it, wall_ms, run_id):
    return [run_id, rep, it, f"{wall_ms:.3f}", "", "", "",
            cfg.estimator, cfg.family, cfg.model, cfg.num_samples, cfg.seed]


def run_repetition(cfg, model, spec, rep, writer):
    """One isolated repetition; returns the final parameter vector."""
    run_id = _run_id(cfg)
    lam = init_params(spec, _stream(cfg.seed, rep, INIT))
    est = build_estimator(cfg)
    est.start(model, spec, lam, _stream(cfg.seed, rep, ANCHOR))
    adam = AdamState.zeros(spec.d_lambda, cfg.gamma_lambda)
    wall_ms = 0.0
    writer.writerow(_eval_row(cfg, model, spec, lam, est, rep, 0, wall_ms, run_id))
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        try:
            batch = None
            if cfg.batch_size:
                batch = model.minibatch(cfg.batch_size,
                                        _stream(cfg.seed, rep, MINIBATCH, it))
            eps = _stream(cfg.seed, rep, EPS, it).standard_normal(
                (cfg.num_samples, spec.base_dim))
            g = est.step(model, spec, lam, eps, batch,
                         expect_rng=_stream(cfg.seed, rep, EXPECT, it),
                         anchor_rng=_stream(cfg.seed, rep, ANCHOR, it))
            adam, lam = adam_step(adam, lam, g, iteration=it)
        except (NumericError, FloatingPointError, np.linalg.LinAlgError):
            wall_ms += (time.perf_counter() - t0) * 1000.0
            writer.writerow(_failure_row(cfg, rep, it, wall_ms, run_id))
            return lam
        wall_ms += (time.perf_counter() - t0) * 1000.0
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            writer.writerow(
                _eval_row(cfg, model, spec, lam, est, rep, it, wall_ms, run_id))
    return lam


def run_experiment(cfg):
    """Run all repetitions, write the trace CSV, return its path."""
    cfg = validate_config(cfg)
    model = build_model(cfg)
    spec = make_family(cfg.family, model.d_z)
    run_id = _run_id(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    trace_path = os.path.join(cfg.out_dir, run_id + ".csv")
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER.split(","))
        for rep in range(cfg.repetitions):
            lam = run_repetition(cfg, model, spec, rep, writer)
            save_checkpoint(os.path.join(cfg.out_dir, f"{run_id}-rep{rep}.ckpt"),
                            lam, cfg.family)
    return trace_path


def warmed_estimator(cfg, model, spec, lam):
    """Estimator state fitted at a fixed lambda (for one-off measurements).

    The surrogate-based estimator needs its v and lagged beta brought
    up-to-date before a variance measurement is meaningful; nocv and the
    per-batch-refit estimator carry no cross-iteration state.
    """
    est = build_estimator(cfg)
    est.start(model, spec, lam, _stream(cfg.seed, 0, ANCHOR))
    if cfg.estimator == "quadcv":
        for it in range(1, cfg.quad_warmup_iters + 1):
            batch = None
            if cfg.batch_size:
                batch = model.minibatch(cfg.batch_size,
                                        _stream(cfg.seed, 0, MINIBATCH, it))
            eps = _stream(cfg.seed, 0, EPS, it).standard_normal(
                (cfg.num_samples, spec.base_dim))
            est.step(model, spec, lam, eps, batch,
                     expect_rng=_stream(cfg.seed, 0, EXPECT, it),
                     anchor_rng=_stream(cfg.seed, 0, ANCHOR, it))
    return est


def measure_variance(cfg, checkpoint_path):
    """Variance-ratio report for a saved parameter vector."""
    cfg = validate_config(cfg)
    lam, kind = load_checkpoint(checkpoint_path)
    if kind != cfg.family:
        raise CheckpointError(
            f"checkpoint family '{kind}' does not match config '{cfg.family}'")
    model = build_model(cfg)
    spec = make_family(cfg.family, model.d_z)
    if lam.size != spec.d_lambda:
        raise CheckpointError(
            f"checkpoint has d_lambda={lam.size}, model/family need "
            f"{spec.d_lambda}")
    est = warmed_estimator(cfg, model, spec, lam)
    return variance_ratio(model, spec, lam, est, _stream(cfg.seed, 0, VR),
                          n_samples=cfg.num_samples,
                          n_replicates=cfg.vr_replicates,
                          expect_rng=_stream(cfg.seed, 0, VR_EXPECT))
