import numpy as np
import pytest

from conftest import cplx, rel_err
from qpinqi.sigmodel import (Bounds, LinearSignalModel, SaturationRecovery, objective,
                             objective_grad, objective_hessian, objective_hvp, objective_value_grad)

TAUS = [0.5, 1.0, 1.5, 2.0, 8.0]


def params(rng, shape):
    return np.stack([0.5 + 0.4 * rng.random(shape), 0.3 * rng.standard_normal(shape),
                     0.4 + 2.5 * rng.random(shape)])


def test_taus_validated():
    for bad in ([], [0.0, 1.0], [1.0, 0.5], [-1.0]):
        with pytest.raises(ValueError):
            SaturationRecovery(bad)


def test_no_recovery_limit():
    m = SaturationRecovery([1e-12])
    q = m.forward(np.array([[1.0], [0.0], [3.0]]))
    assert abs(q[0, 0]) < 1e-11


def test_half_recovery_point():
    m = SaturationRecovery([1.0])
    q = m.forward(np.array([[2.0], [0.0], [np.log(2.0)]]))
    assert abs(q[0, 0] - 1.0) < 1e-15


def test_scalar_value():
    m = SaturationRecovery([8.0])
    q = m.forward(np.array([[1.0], [1.0], [1.0]]))
    assert abs(q[0, 0] - (1 + 1j) * (1 - np.exp(-8.0))) < 1e-15


def test_negative_r1_is_smooth():
    m = SaturationRecovery(TAUS)
    q = m.forward(np.array([[1.0], [0.0], [-0.5]]))
    assert np.all(np.isfinite(q))


def test_jvp_vjp_finite_differences(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (3, 4))
    dp = rng.standard_normal(p.shape)
    dy = cplx(rng, (5, 3, 4))
    eps = 1e-6
    fd = (m.forward(p + eps * dp) - m.forward(p - eps * dp)) / (2 * eps)
    assert rel_err(m.jvp(p, dp), fd) < 1e-8
    # adjoint identity between jvp and vjp
    assert abs(np.vdot(dy, m.jvp(p, dp)).real - np.sum(m.vjp(p, dy) * dp)) < 1e-12 * np.abs(dy).sum()


def test_jvp_formulas():
    m = SaturationRecovery([2.0])
    p = np.array([[0.7], [0.2], [1.3]])
    jac = m.jacobian(p)[:, :, 0]
    rec = 1 - np.exp(-2.0 * 1.3)
    assert np.allclose(jac[0], [rec, 1j * rec, (0.7 + 0.2j) * 2.0 * np.exp(-2.6)])


def test_forward_and_jacobian_agree(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (2, 3))
    q, jac = m.forward_and_jacobian(p)
    assert np.array_equal(q, m.forward(p)) and np.allclose(jac, m.jacobian(p), rtol=0, atol=1e-15)


def test_gauss_newton_hvp(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (4,))
    y = m.forward(p)
    dp = rng.standard_normal(p.shape)
    jac = m.jacobian(p)
    expected = 2 * np.einsum("ia...,ib...,b...->a...", jac.conj(), jac, dp).real
    assert rel_err(objective_hvp(m, p, y, 0.0, dp, exact=False), expected) < 1e-13
    # at an exact fit the second-order term vanishes
    assert rel_err(objective_hvp(m, p, y, 0.0, dp, exact=True), expected) < 1e-13


def test_exact_hessian_matches_gradient_differences(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (5,))
    y = m.forward(p) + 0.2 * cplx(rng, (5, 5))
    p_reg = p + 0.1
    dp = rng.standard_normal(p.shape)
    eps = 1e-6
    fd = (objective_grad(m, p + eps * dp, y, p_reg, 0.4) - objective_grad(m, p - eps * dp, y, p_reg, 0.4)) / (2 * eps)
    assert rel_err(objective_hvp(m, p, y, 0.4, dp), fd) < 1e-7


def test_objective_gradient(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (6,))
    y = m.forward(p) + 0.1 * cplx(rng, (5, 6))
    p_reg = params(rng, (6,))
    dp = rng.standard_normal(p.shape)
    eps = 1e-6
    fd = (objective(m, p + eps * dp, y, p_reg, 0.7) - objective(m, p - eps * dp, y, p_reg, 0.7)) / (2 * eps)
    g = objective_grad(m, p, y, p_reg, 0.7)
    assert rel_err(np.sum(g * dp, axis=0), fd) < 1e-8
    val, g2 = objective_value_grad(m, p, y, p_reg, 0.7)
    assert np.allclose(val, objective(m, p, y, p_reg, 0.7)) and np.allclose(g2, g)


def test_hessian_symmetric(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (3,))
    h = objective_hessian(m, p, m.forward(p) + 0.3, 0.2)
    assert np.allclose(h, np.swapaxes(h, 0, 1))


def test_initial_guess_recovers_noise_free(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (8, 8))
    est = m.initial_guess(m.forward(p))
    assert np.max(np.abs(est[2] / p[2] - 1)) < 0.01
    assert np.max(np.abs(est[:2] - p[:2])) < 0.01


def test_initial_guess_vjp(rng):
    m = SaturationRecovery(TAUS)
    p = params(rng, (4, 3))
    y = m.forward(p) + 0.01 * cplx(rng, (5, 4, 3))
    dp = rng.standard_normal(p.shape)
    v = cplx(rng, y.shape)
    eps = 1e-7
    fd = np.sum(dp * (m.initial_guess(y + eps * v) - m.initial_guess(y - eps * v))) / (2 * eps)
    assert abs(np.vdot(m.initial_guess_vjp(y, dp), v).real - fd) < 1e-6 * max(abs(fd), 1)


def test_linear_model_initial_guess(rng):
    mat = cplx(rng, (5, 3))
    m = LinearSignalModel(mat)
    p = rng.standard_normal((3, 4))
    assert np.allclose(m.initial_guess(m.forward(p)), p)
    y = cplx(rng, (5, 4))
    dp = rng.standard_normal((3, 4))
    v = cplx(rng, y.shape)
    lhs = np.sum(dp * m.initial_guess(v))
    assert np.isclose(np.vdot(m.initial_guess_vjp(y, dp), v).real, lhs)


class TestBounds:
    def test_defaults(self):
        b = Bounds()
        assert b.lo.tolist() == [-2, -2, -1] and b.hi.tolist() == [2, 2, 20]

    def test_maps_onto_open_box(self, rng):
        b = Bounds()
        u = 50 * rng.standard_normal((3, 100))
        x = b.apply(u)
        assert np.all(x >= b.lo[:, None]) and np.all(x <= b.hi[:, None])

    def test_invert_roundtrip(self, rng):
        b = Bounds()
        x = b.lo[:, None] + (b.hi - b.lo)[:, None] * (0.01 + 0.98 * rng.random((3, 20)))
        assert np.allclose(b.apply(b.invert(x)), x, rtol=0, atol=1e-12)

    def test_invert_rejects_outside(self):
        b = Bounds()
        with pytest.raises(ValueError):
            b.invert(np.array([[0.0], [0.0], [20.0]]))
        with pytest.raises(ValueError):
            b.invert(np.array([[3.0], [0.0], [1.0]]))

    def test_dxdu(self, rng):
        b = Bounds()
        u = rng.standard_normal((3, 7))
        eps = 1e-6
        assert np.allclose(b.dxdu(u), (b.apply(u + eps) - b.apply(u - eps)) / (2 * eps), atol=1e-8)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Bounds((0, 0, 1), (1, 1, 1))
