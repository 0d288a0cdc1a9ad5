import numpy as np
import pytest

from conftest import cplx, rel_err
from qpinqi.core import SolverError
from qpinqi.gradcheck import check_lindc, random_acquisition
from qpinqi.lindc import CgConfig, cg_solve, lindc_backward, lindc_forward


def spd(rng, n):
    a = cplx(rng, (n, n))
    return a.conj().T @ a + n * np.eye(n)


def test_cg_matches_direct_solve(rng):
    h = spd(rng, 20)
    b = cplx(rng, 20)
    res = cg_solve(lambda v: h @ v, b, tol=1e-13, max_iter=100)
    assert rel_err(res.x, np.linalg.solve(h, b)) < 1e-11
    assert res.residual <= 1e-13 * np.linalg.norm(b)


def test_cg_zero_rhs():
    res = cg_solve(lambda v: 2 * v, np.zeros(5, complex))
    assert res.iters == 0 and not np.any(res.x)


def test_cg_iteration_cap(rng):
    h = spd(rng, 30)
    res = cg_solve(lambda v: h @ v, cplx(rng, 30), tol=1e-15, max_iter=3)
    assert res.iters == 3 and res.residual > 0


def test_cg_breakdown_raises(rng):
    with pytest.raises(SolverError):
        cg_solve(lambda v: -v, cplx(rng, 4))
    with pytest.raises(SolverError):
        cg_solve(lambda v: v, np.array([np.nan, 1.0]))


def test_config_validation():
    with pytest.raises(ValueError):
        CgConfig(tol=0)
    with pytest.raises(ValueError):
        CgConfig(max_iter=0)


def test_forward_solves_normal_equations(rng):
    acq = random_acquisition(rng, 8, 2, 3)
    priors = [(cplx(rng, acq.image_shape), 0.2), (cplx(rng, acq.image_shape), 0.7)]
    k = acq.forward(cplx(rng, acq.image_shape))
    y, info = lindc_forward(k, acq, priors, CgConfig(tol=1e-13, max_iter=500))
    rhs = acq.adjoint(k) + sum(lam * yi for yi, lam in priors)
    assert rel_err(acq.gram(y, 0.9), rhs) < 1e-11
    assert info.iters > 0


def test_single_prior_full_sampling_closed_form(rng):
    n = 8
    acq = random_acquisition(rng, n, 3, 2, lines=n)
    acq = acq.with_coils(acq.coils)
    acq.masks[:] = True
    acq = acq.with_coils(acq.coils)
    x, prior = cplx(rng, acq.image_shape), cplx(rng, acq.image_shape)
    y, _ = lindc_forward(acq.forward(x), acq, [(prior, 0.5)], CgConfig(tol=1e-14))
    assert rel_err(y, (x + 0.5 * prior) / 1.5) < 1e-12


def test_nonpositive_weights_rejected(rng):
    acq = random_acquisition(rng, 8, 2, 2)
    with pytest.raises(ValueError):
        lindc_forward(np.zeros(acq.data_shape, complex), acq, [(np.zeros(acq.image_shape), 0.0)])


def test_gradients_match_finite_differences():
    rep = check_lindc(eps=1e-5, seed=3)
    assert {r.name for r in rep.rows} >= {"prior image 1", "weight 2", "k-space", "coil maps"}
    assert rep.max_error <= 1e-4, rep.table()


def test_backward_zero_cotangent(rng):
    acq = random_acquisition(rng, 8, 2, 2)
    priors = [(cplx(rng, acq.image_shape), 0.3)]
    k = acq.forward(cplx(rng, acq.image_shape))
    y, _ = lindc_forward(k, acq, priors)
    g = lindc_backward(k, acq, priors, y, np.zeros_like(y), want_coils=True)
    assert not np.any(g.priors[0]) and not np.any(g.lams) and not np.any(g.k) and not np.any(g.coils)
