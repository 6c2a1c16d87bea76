import numpy as np
import pytest

from pathcv import autodiff as ad


def test_square_gradient_hand_value():
    val, g = ad.grad(lambda x: x.square().sum(), np.array([3.0]))
    assert val == 9.0
    assert np.allclose(g, [6.0], atol=0, rtol=0)


def test_product_log_gradient_hand_value():
    # f(a, b) = a*b + log b at (2, 3): df/da = b, df/db = a + 1/b
    def f(x):
        return (x[0] * x[1] + ad.log(x[1])).sum()

    val, g = ad.grad(f, np.array([2.0, 3.0]))
    assert abs(val - (6.0 + np.log(3.0))) < 1e-12
    assert abs(g[0] - 3.0) < 1e-12
    assert abs(g[1] - (2.0 + 1.0 / 3.0)) < 1e-12


def test_mlp_gradient_matches_fd():
    rng = np.random.default_rng(7)
    n_in, n_hid = 4, 5
    x0 = rng.normal(size=n_in)
    n_params = n_hid * n_in + n_hid + n_hid + 1

    def f(p):
        w1 = p[: n_hid * n_in].reshape(n_hid, n_in)
        b1 = p[n_hid * n_in: n_hid * n_in + n_hid]
        w2 = p[n_hid * n_in + n_hid: n_hid * n_in + 2 * n_hid]
        b2 = p[-1]
        h = ad.relu(ad.matvec(w1, x0) + b1)
        return ad.dot(w2, h) + b2

    p = rng.normal(size=n_params)
    assert ad.check_gradient_fd(f, p, step=1e-5) <= 1e-4


def test_check_gradient_fd_linear_is_exact():
    a = np.array([1.5, -2.0, 0.5])
    err = ad.check_gradient_fd(lambda x: ad.dot(a, x), np.array([0.3, 0.1, -0.7]))
    assert err < 1e-8


def test_relu_derivative_at_zero_is_zero():
    _, g = ad.grad(lambda x: x.relu().sum(), np.array([0.0, -1.0, 2.0]))
    assert np.array_equal(g, np.array([0.0, 0.0, 1.0]))


def test_exp_tanh_clamp_window():
    # outside [-60, 60] the value saturates and the derivative is exactly 0
    val, g = ad.grad(lambda x: ad.exp(x).sum(), np.array([61.0, -61.0, 1.0]))
    assert abs(val - (np.exp(60.0) + np.exp(-60.0) + np.e)) < 1e-6
    assert g[0] == 0.0 and g[1] == 0.0 and abs(g[2] - np.e) < 1e-12
    _, gt = ad.grad(lambda x: ad.tanh(x).sum(), np.array([100.0, 0.5]))
    assert gt[0] == 0.0
    assert abs(gt[1] - (1.0 - np.tanh(0.5) ** 2)) < 1e-12


def test_nonfinite_raises_naming_primitive():
    with pytest.raises(ad.NumericError, match="log"):
        ad.grad(lambda x: ad.log(x).sum(), np.array([-1.0]))
    with pytest.raises(ad.NumericError, match="div"):
        ad.grad(lambda x: (x / 0.0).sum(), np.array([1.0]))


def test_broadcasting_gradients_match_fd():
    rng = np.random.default_rng(11)
    eps = rng.normal(size=(6, 3))

    def f(p):  # (d,) parameter against an (L, d) batch: exercises unbroadcast
        mu, rho = p[:3], p[3:]
        z = mu + ad.exp(rho) * eps
        return (z.square() * 0.5).sum()

    p = rng.normal(size=6)
    assert ad.check_gradient_fd(f, p) <= 1e-4


def test_matmul_matinv_logdet_match_fd():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(4, 2))

    def f(p):
        a = p.reshape(4, 4)
        m = ad.matmul(a.transpose_last(), a) + np.eye(4) * 0.5  # SPD
        y = ad.matmul(ad.matinv(m), b)
        return y.square().sum() + ad.logdet(m)

    p = rng.normal(size=16) * 0.5
    assert ad.check_gradient_fd(f, p) <= 1e-4


def test_getitem_sum_axis_match_fd():
    rng = np.random.default_rng(5)

    def f(p):
        m = p.reshape(3, 4)
        top = m[0:2, 1:]          # basic slice
        col = m[:, 2]
        return top.sum(axis=0).square().sum() + (col * col).sum()

    p = rng.normal(size=12)
    assert ad.check_gradient_fd(f, p) <= 1e-4


def test_fancy_index_accumulates_duplicates():
    idx = np.array([0, 1, 0, 2])

    def f(p):
        return p[idx].sum()

    _, g = ad.grad(f, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(g, np.array([2.0, 1.0, 1.0]))


def test_batched_seed_gives_per_row_gradients():
    # row-separable graph + ones seed on the (L,) output = per-sample rows
    rng = np.random.default_rng(13)
    L, d = 5, 3
    lam = rng.normal(size=d)
    eps = rng.normal(size=(L, d))

    tape = ad.Tape()
    tiled = tape.var(np.tile(lam, (L, 1)))
    z = tiled + eps
    out = (z.square() * 0.5).sum(axis=1)
    tape.backward(out, np.ones(L))
    rows = tiled.grad

    for l in range(L):
        _, gl = ad.grad(lambda x: (x + eps[l]).square().sum() * 0.5, lam)
        assert np.allclose(rows[l], gl, atol=1e-12)


def test_softplus_stable_and_correct():
    x = np.array([-700.0, -5.0, 0.0, 5.0, 700.0])
    got = ad.softplus(x)
    want = np.logaddexp(0.0, x)
    # huge |x| saturates to the exact linear branch; interior matches closely
    assert np.all(np.isfinite(got))
    assert np.allclose(got, want, atol=1e-10)

    def f(p):
        return ad.softplus(p).sum()

    assert ad.check_gradient_fd(f, np.array([-2.0, 0.3, 4.0])) <= 1e-4


def test_dot_matvec_match_fd():
    rng = np.random.default_rng(17)
    A = rng.normal(size=(4, 3))

    def f(p):
        y = ad.matvec(A, p)
        return ad.dot(y, y)

    assert ad.check_gradient_fd(f, rng.normal(size=3)) <= 1e-4


def test_grad_is_bitwise_deterministic():
    rng = np.random.default_rng(23)
    eps = rng.normal(size=(4, 2))

    def f(p):
        z = p[:2] + ad.exp(p[2:]) * eps
        return ad.tanh(z).square().sum()

    x = rng.normal(size=4)
    v1, g1 = ad.grad(f, x)
    v2, g2 = ad.grad(f, x)
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_value_only_path_matches_tape_values():
    rng = np.random.default_rng(29)
    x = rng.normal(size=5)

    def expr(v):
        return ad.vsum(ad.tanh(v) * 2.0 + ad.softplus(v))

    tape = ad.Tape()
    assert float(ad.value_of(expr(tape.var(x)))) == float(expr(x))


def test_different_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a, b = t1.var(np.ones(2)), t2.var(np.ones(2))
    with pytest.raises(ValueError):
        _ = a + b
