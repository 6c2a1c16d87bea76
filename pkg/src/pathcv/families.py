"""Variational families: reparameterized samplers and log-densities.

Each family is described by a FamilySpec holding the flat parameter layout.
All closures over the parameter vector are written against the dispatching
ops in `autodiff`, so they evaluate both on plain arrays and on tape Vars,
and they accept a leading batch axis on the base noise and/or a tiled
parameter matrix (row-separable throughout).

Families:
  * mean_field_gaussian  z = mu + exp(log_sigma) * eps            d_lambda = 2 d_z
  * rank5_gaussian       z = mu + F u + exp(log_sigma) * eps_z    d_lambda = 7 d_z
                         base noise is (eps_z, u) of length d_z + 5
  * real_nvp             two affine coupling layers on alternating
                         parity masks; scale/translation nets are
                         8x16x16 ReLU MLPs with a final linear layer
                         and tanh on the scale output
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (dot, exp, matinv, matmul, matvec, logdet, relu,
                       reshape, square, tanh, transpose_last, value_of, vsum)

MEAN_FIELD = "mean_field_gaussian"
RANK5 = "rank5_gaussian"
REAL_NVP = "real_nvp"
FAMILY_KINDS = (MEAN_FIELD, RANK5, REAL_NVP)

RANK = 5
NVP_LAYERS = 2
NVP_HIDDEN = (8, 16, 16)

LOG_2PI = float(np.log(2.0 * np.pi))


class CapabilityError(ValueError):
    """Requested operation is undefined for this family kind."""


@dataclass
class FamilySpec:
    kind: str
    d_z: int
    d_lambda: int
    base_dim: int
    layout: dict = field(default_factory=dict)
    # real_nvp only: masks per coupling layer and per-net weight slices
    masks: tuple = ()
    net_slices: dict = field(default_factory=dict)


@dataclass
class EpsBatch:
    """L base-noise draws (rows), tagged with where the stream came from."""

    values: np.ndarray
    origin: str = ""

    @property
    def L(self):
        return self.values.shape[0]


def eps_values(eps):
    return eps.values if isinstance(eps, EpsBatch) else np.asarray(eps, dtype=np.float64)


def sample_base(base_dim, L, rng, origin=""):
    """Draw an L x base_dim matrix of standard normals from `rng`."""
    if L < 1 or base_dim < 1:
        raise ValueError("sample_base requires L >= 1 and base_dim >= 1")
    return EpsBatch(rng.standard_normal((L, base_dim)), origin)


def _nvp_net_shapes(d_z):
    sizes = (d_z,) + NVP_HIDDEN + (d_z,)
    return [((sizes[i + 1], sizes[i]), (sizes[i + 1],)) for i in range(len(sizes) - 1)]


def make_family(kind, d_z):
    if d_z < 1:
        raise ValueError("d_z must be positive")
    if kind == MEAN_FIELD:
        layout = {"mu": slice(0, d_z), "log_sigma": slice(d_z, 2 * d_z)}
        return FamilySpec(kind, d_z, 2 * d_z, d_z, layout)
    if kind == RANK5:
        layout = {
            "mu": slice(0, d_z),
            "log_sigma": slice(d_z, 2 * d_z),
            "factor": slice(2 * d_z, (2 + RANK) * d_z),  # row-major (d_z, RANK)
        }
        return FamilySpec(kind, d_z, (2 + RANK) * d_z, d_z + RANK, layout)
    if kind == REAL_NVP:
        if d_z < 2:
            raise ValueError("real_nvp needs d_z >= 2")
        masks = []
        for layer in range(NVP_LAYERS):
            m = np.zeros(d_z)
            m[layer % 2::2] = 1.0  # layer 0 keeps even indices, layer 1 odd
            masks.append(m)
        net_slices = {}
        pos = 0
        for layer in range(NVP_LAYERS):
            for name in ("scale", "translate"):
                parts = []
                for w_shape, b_shape in _nvp_net_shapes(d_z):
                    w_n = w_shape[0] * w_shape[1]
                    parts.append((slice(pos, pos + w_n), w_shape))
                    pos += w_n
                    parts.append((slice(pos, pos + b_shape[0]), b_shape))
                    pos += b_shape[0]
                net_slices[(layer, name)] = parts
        return FamilySpec(kind, d_z, pos, d_z, {}, tuple(masks), net_slices)
    raise ValueError(f"unknown family kind '{kind}'")


def init_params(spec, rng):
    """Initial parameter vector.

    Gaussian families draw every coordinate from N(0, 0.5^2). The flow uses
    Glorot-normal weight matrices (std sqrt(2 / (fan_in + fan_out))) and
    zero biases, drawn in layout order.
    """
    if spec.kind in (MEAN_FIELD, RANK5):
        return rng.normal(0.0, 0.5, size=spec.d_lambda)
    lam = np.zeros(spec.d_lambda)
    for layer in range(NVP_LAYERS):
        for name in ("scale", "translate"):
            parts = spec.net_slices[(layer, name)]
            for sl, shape in parts:
                if len(shape) == 2:
                    fan_out, fan_in = shape
                    std = np.sqrt(2.0 / (fan_in + fan_out))
                    lam[sl] = rng.normal(0.0, std, size=sl.stop - sl.start)
    return lam


def _tail_reshape(x, tail):
    lead = tuple(x.shape[:-1])
    return reshape(x, lead + tuple(tail))


def _apply_net(spec, lam, key, x):
    """Run one 8x16x16 ReLU MLP (final layer linear) read out of `lam`."""
    parts = spec.net_slices[key]
    h = x
    n_layers = len(parts) // 2
    for i in range(n_layers):
        w_sl, w_shape = parts[2 * i]
        b_sl, _ = parts[2 * i + 1]
        W = _tail_reshape(lam[..., w_sl], w_shape)
        h = matvec(W, h) + lam[..., b_sl]
        if i < n_layers - 1:
            h = relu(h)
    return h


def _couple_forward(spec, lam, layer, x):
    """y = m*x + (1-m)*(x*exp(s) + t); returns (y, sum of scale outputs)."""
    m = spec.masks[layer]
    xm = x * m
    s = tanh(_apply_net(spec, lam, (layer, "scale"), xm)) * (1.0 - m)
    t = _apply_net(spec, lam, (layer, "translate"), xm) * (1.0 - m)
    y = xm + x * exp(s) * (1.0 - m) + t
    return y, vsum(s, axis=-1)


def _couple_inverse(spec, lam, layer, y):
    m = spec.masks[layer]
    ym = y * m
    s = tanh(_apply_net(spec, lam, (layer, "scale"), ym)) * (1.0 - m)
    t = _apply_net(spec, lam, (layer, "translate"), ym) * (1.0 - m)
    x = ym + (y - t) * exp(-s) * (1.0 - m)
    return x, vsum(s, axis=-1)


def _nvp_forward(spec, lam, eps):
    z = eps
    total = 0.0
    for layer in range(NVP_LAYERS):
        z, s_sum = _couple_forward(spec, lam, layer, z)
        total = s_sum + total
    return z, total


def transform(spec, lam, eps):
    """Reparameterized sample z = T(eps; lam). Batch axes broadcast."""
    e = eps_values(eps)
    if spec.kind == MEAN_FIELD:
        mu = lam[..., spec.layout["mu"]]
        rho = lam[..., spec.layout["log_sigma"]]
        return mu + exp(rho) * e
    if spec.kind == RANK5:
        mu = lam[..., spec.layout["mu"]]
        rho = lam[..., spec.layout["log_sigma"]]
        F = _tail_reshape(lam[..., spec.layout["factor"]], (spec.d_z, RANK))
        e_z, u = e[..., : spec.d_z], e[..., spec.d_z:]
        return mu + matvec(F, u) + exp(rho) * e_z
    if spec.kind == REAL_NVP:
        return _nvp_forward(spec, lam, e)[0]
    raise ValueError(f"unknown family kind '{spec.kind}'")


def inverse_transform(spec, lam, z):
    """T^{-1}(z; lam); defined for square transports only."""
    if spec.kind == MEAN_FIELD:
        mu = lam[..., spec.layout["mu"]]
        rho = lam[..., spec.layout["log_sigma"]]
        return (z - mu) * exp(-rho)
    if spec.kind == REAL_NVP:
        x = z
        for layer in reversed(range(NVP_LAYERS)):
            x, _ = _couple_inverse(spec, lam, layer, x)
        return x
    raise CapabilityError(f"'{spec.kind}' transport is not invertible (base dim != d_z)")


def log_density(spec, lam, z):
    """log q_lambda(z); scalar for a single point, (L,) for a batch.

    For the flow this inverts the couplings analytically at z, so when z was
    produced by transform() on the same tape, gradients flow through both
    the sample path and the density's direct parameter dependence.
    """
    if spec.kind == MEAN_FIELD:
        mu = lam[..., spec.layout["mu"]]
        rho = lam[..., spec.layout["log_sigma"]]
        w = (z - mu) * exp(-rho)
        return -0.5 * vsum(square(w), axis=-1) - vsum(rho, axis=-1) \
            - 0.5 * spec.d_z * LOG_2PI
    if spec.kind == RANK5:
        # Sigma = F F^T + D with D = diag(exp(2 rho)); Woodbury inverse and
        # matrix-determinant lemma keep everything in RANK x RANK solves.
        mu = lam[..., spec.layout["mu"]]
        rho = lam[..., spec.layout["log_sigma"]]
        F = _tail_reshape(lam[..., spec.layout["factor"]], (spec.d_z, RANK))
        dinv = exp(-2.0 * rho)
        Fd = F * _tail_reshape(dinv, (spec.d_z, 1))
        K = matmul(transpose_last(F), Fd) + np.eye(RANK)
        diff = z - mu
        proj = matvec(transpose_last(Fd), diff)
        quad = dot(diff, diff * dinv) - dot(proj, matvec(matinv(K), proj))
        ld = 2.0 * vsum(rho, axis=-1) + logdet(K)
        return -0.5 * quad - 0.5 * ld - 0.5 * spec.d_z * LOG_2PI
    if spec.kind == REAL_NVP:
        x = z
        total = 0.0
        for layer in reversed(range(NVP_LAYERS)):
            x, s_sum = _couple_inverse(spec, lam, layer, x)
            total = s_sum + total
        base = -0.5 * vsum(square(x), axis=-1) - 0.5 * spec.d_z * LOG_2PI
        return base - total
    raise ValueError(f"unknown family kind '{spec.kind}'")


def mean_cov(spec, lam):
    """Exact mean and covariance of q; Gaussian families only."""
    lam = value_of(lam)
    if lam.ndim != 1:
        raise ValueError("mean_cov expects a single parameter vector")
    if spec.kind == MEAN_FIELD:
        mu = lam[spec.layout["mu"]]
        sig = np.exp(lam[spec.layout["log_sigma"]])
        return mu.copy(), np.diag(sig ** 2)
    if spec.kind == RANK5:
        mu = lam[spec.layout["mu"]]
        sig = np.exp(lam[spec.layout["log_sigma"]])
        F = lam[spec.layout["factor"]].reshape(spec.d_z, RANK)
        return mu.copy(), F @ F.T + np.diag(sig ** 2)
    raise CapabilityError("mean_cov is undefined for the flow family")
