import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflab.errors import CertificateViolated, DimensionMismatch
from mflab.model import (
    GatedTanh,
    LinearTanh,
    SquaredError,
    certify_growth,
    grad_loss,
    make_loss,
    make_model,
)


def reference_v(kind, d, x, theta):
    """Scalar-loop re-evaluation of both fields, independent of the numpy kernels."""
    out = [0.0] * d
    if kind == "linear-tanh":
        for a in range(d):
            out[a] = theta[d * d + a] + sum(theta[a * d + b] * math.tanh(x[b]) for b in range(d))
    else:
        for a in range(d):
            z = theta[d + d * d + a] + sum(theta[d + a * d + b] * x[b] for b in range(d))
            out[a] = theta[a] * math.tanh(z)
    return np.array(out)


def central_jacobian(f, z, h=1e-5):
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_dimensions():
    assert LinearTanh(3).m == 12
    assert GatedTanh(3).m == 15
    assert make_model("LinearTanh", 2).kind == "linear-tanh"
    with pytest.raises(ValueError):
        make_model("relu", 2)


def test_linear_tanh_trivial_values():
    model = LinearTanh(1)
    assert model.eval_v([0.7], [0.0, 0.0]) == pytest.approx([0.0])
    assert model.eval_v([0.0], [2.0, 1.0]) == pytest.approx([1.0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        LinearTanh(2).eval_v([0.0], np.zeros(6))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_fields_match_reference(kind, d, rng):
    model = make_model(kind, d)
    for _ in range(25):
        x = rng.standard_normal(d)
        theta = rng.standard_normal(model.m)
        np.testing.assert_allclose(model.eval_v(x, theta), reference_v(kind, d, x, theta),
                                   rtol=1e-13, atol=1e-14)


def test_linear_tanh_jacobians_closed_form(rng):
    model = LinearTanh(3)
    x, theta = rng.standard_normal(3), rng.standard_normal(12)
    W = theta[:9].reshape(3, 3)
    np.testing.assert_allclose(model.jac_v_x(x, theta), W * (1 - np.tanh(x) ** 2)[None, :])
    assert np.all(model.jac_v_x(x, np.zeros(12)) == 0)
    np.testing.assert_array_equal(model.jac_v_theta(x, theta)[:, 9:], np.eye(3))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_jacobians_match_finite_differences(kind, d, rng):
    model = make_model(kind, d)
    worst = 0.0
    for _ in range(100 // 3 + 1):
        x, theta = rng.standard_normal(d), rng.standard_normal(model.m)
        jx = central_jacobian(lambda z: reference_v(kind, d, z, theta), x)
        jt = central_jacobian(lambda z: reference_v(kind, d, x, z), theta)
        for exact, fd in ((model.jac_v_x(x, theta), jx), (model.jac_v_theta(x, theta), jt)):
            scale = max(np.abs(exact).max(), 1e-3)
            worst = max(worst, np.abs(exact - fd).max() / scale)
    assert worst <= 1e-6


def test_linear_tanh_is_linear_in_theta(rng):
    model = LinearTanh(2)
    x = rng.standard_normal(2)
    t1, t2 = rng.standard_normal((2, 6))
    a, b = 0.7, -1.3
    np.testing.assert_allclose(model.eval_v(x, a * t1 + b * t2),
                               a * model.eval_v(x, t1) + b * model.eval_v(x, t2), atol=1e-14)


def test_batched_kernels_consistent(kind, rng):
    model = make_model(kind, 2)
    X = rng.standard_normal((5, 2))
    thetas = rng.standard_normal((3, model.m))
    w = np.array([0.2, 0.3, 0.5])
    vals = model.values(X, thetas)
    for i in range(5):
        for j in range(3):
            np.testing.assert_allclose(vals[i, j], reference_v(kind, 2, X[i], thetas[j]), atol=1e-14)
    np.testing.assert_allclose(model.mean_field(X, thetas, w), np.einsum("j,ija->ia", w, vals))
    J = model.mean_jac_x(X, thetas, w)
    ref = sum(w[j] * np.stack([model.jac_v_x(X[i], thetas[j]) for i in range(5)]) for j in range(3))
    np.testing.assert_allclose(J, ref, atol=1e-14)
    G = rng.standard_normal((5, 2))
    np.testing.assert_allclose(model.mean_vjp_x(X, thetas, w, G), np.einsum("iab,ia->ib", J, G),
                               atol=1e-14)
    vjp = model.vjp_theta(X, thetas, G)
    for j in range(3):
        ref = sum(model.jac_v_theta(X[i], thetas[j]).T @ G[i] for i in range(5))
        np.testing.assert_allclose(vjp[j], ref, atol=1e-13)
    dth = rng.standard_normal(thetas.shape)
    jvp = model.jvp_theta(X, thetas, dth)
    for i in range(5):
        for j in range(3):
            np.testing.assert_allclose(jvp[i, j], model.jac_v_theta(X[i], thetas[j]) @ dth[j],
                                       atol=1e-13)


def test_squared_error():
    loss = SquaredError()
    assert grad_loss(loss, [3.0], [1.0]) == pytest.approx([4.0])
    assert np.all(grad_loss(loss, [1.0, 2.0], [1.0, 2.0]) == 0)
    assert make_loss("SquaredError", radius=2.0).A == pytest.approx(8.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_loss_gradient_and_growth(d, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(d), r.uniform(-1, 1, d)
    loss = SquaredError.for_radius(np.sqrt(d))
    fd = central_jacobian(lambda z: np.atleast_1d(loss.value(z, y)), x)[0]
    np.testing.assert_allclose(grad_loss(loss, x, y), fd, rtol=1e-6, atol=1e-9)
    assert loss.value(x, y) >= 0
    assert loss.check_growth(x, y)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_linear_tanh_certificate_passes(d):
    model = LinearTanh(d)
    assert model.growth_constant == pytest.approx(2 * np.sqrt(d))
    report = certify_growth(model, 500, radius=10.0)
    assert report.passed and report.growth_ratio <= model.growth_constant


def test_gated_tanh_certificate_passes():
    report = certify_growth(GatedTanh(2), 500, radius=3.0)
    assert report.passed


def test_zero_probes_have_zero_ratio():
    model = LinearTanh(2)
    report = certify_growth(model, 20, radius=5.0, theta_probes=np.zeros((20, model.m)))
    assert report.growth_ratio == 0.0 and report.lipschitz_ratio == 0.0


def test_wrong_certificate_is_rejected():
    with pytest.raises(CertificateViolated):
        certify_growth(LinearTanh(2, growth_constant=1e-9), 50, radius=1.0)


def test_growth_exponent_must_be_subquadratic():
    with pytest.raises(ValueError):
        LinearTanh(1, growth_exponent=2.0)
