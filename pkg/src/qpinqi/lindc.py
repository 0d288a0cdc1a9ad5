"""Linear data-consistency layer.

Forward: minimize ``||A y - k||^2 + sum_i lam_i ||y - y_i||^2`` over the image
series ``y`` by conjugate gradients on the normal equations
``(A^H A + sum_i lam_i) y = A^H k + sum_i lam_i y_i``.

Backward: implicit differentiation of the optimality condition. One more CG
solve gives ``g = (A^H A + sum_i lam_i)^{-1} dL/dy*`` and every input gradient is
an explicit expression in ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SolverError
from .encoding import ifft2c


@dataclass
class CgConfig:
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("CG tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("CG needs at least one iteration")


@dataclass
class CgResult:
    x: np.ndarray
    iters: int
    residual: float


def cg_solve(apply_h, b, tol: float = 1e-6, max_iter: int = 200) -> CgResult:
    """Conjugate gradients for a Hermitian positive definite operator, started at zero.

    Stops once ``||H x - b|| <= tol * max(1, ||b||)`` or after ``max_iter`` steps.
    """
    b = np.asarray(b)
    x = np.zeros_like(b, dtype=np.result_type(b, float))
    r = b.astype(x.dtype, copy=True)
    rr = np.vdot(r, r).real
    bound = tol * max(1.0, np.sqrt(rr))
    if not np.isfinite(rr):
        raise SolverError("non-finite right-hand side in CG")
    if np.sqrt(rr) <= bound:
        return CgResult(x, 0, float(np.sqrt(rr)))
    d = r.copy()
    for it in range(1, max_iter + 1):
        hd = apply_h(d)
        dhd = np.vdot(d, hd).real
        if not np.isfinite(dhd) or dhd <= 0:
            raise SolverError(f"CG breakdown at step {it} (d^H H d = {dhd})")
        alpha = rr / dhd
        x += alpha * d
        r -= alpha * hd
        rr_new = np.vdot(r, r).real
        if not np.isfinite(rr_new):
            raise SolverError(f"non-finite residual in CG at step {it}")
        if np.sqrt(rr_new) <= bound:
            return CgResult(x, it, float(np.sqrt(rr_new)))
        d *= rr_new / rr
        d += r
        rr = rr_new
    return CgResult(x, max_iter, float(np.sqrt(rr)))


@dataclass
class LinearDcGrads:
    priors: list
    lams: np.ndarray
    k: np.ndarray | None = None
    coils: np.ndarray | None = None
    cg_iters: int = 0


@dataclass
class LinearDcInfo:
    iters: int
    residual: float
    extra: dict = field(default_factory=dict)


def _check_priors(priors):
    for _, lam in priors:
        if not lam > 0:
            raise ValueError(f"prior weights must be positive, got {lam}")


def lindc_forward(k, acq, priors, cfg: CgConfig | None = None):
    """Solve the regularized data-consistency problem.

    Parameters
    ----------
    k : ndarray
        Multi-coil k-space, ``acq.data_shape``.
    acq : AcquisitionModel
    priors : list of (ndarray, float)
        Image-series priors ``y_i`` with positive weights ``lam_i``.

    Returns
    -------
    y : ndarray
    info : LinearDcInfo
    """
    cfg = cfg or CgConfig()
    _check_priors(priors)
    shift = float(sum(lam for _, lam in priors))
    b = acq.adjoint(k)
    for yi, lam in priors:
        b = b + lam * yi
    res = cg_solve(lambda v: acq.gram(v, shift), b, cfg.tol, cfg.max_iter)
    return res.x, LinearDcInfo(res.iters, res.residual)


def lindc_backward(k, acq, priors, y_star, dy, cfg: CgConfig | None = None,
                   want_k: bool = True, want_coils: bool = False) -> LinearDcGrads:
    """Gradients of a loss with respect to every input of :func:`lindc_forward`.

    ``dy`` is the loss gradient at the solution ``y_star``. Returns the gradients
    for each prior image, each weight, and optionally the k-space data and the
    (unnormalized) coil maps.
    """
    cfg = cfg or CgConfig()
    _check_priors(priors)
    shift = float(sum(lam for _, lam in priors))
    res = cg_solve(lambda v: acq.gram(v, shift), dy, cfg.tol, cfg.max_iter)
    g = res.x
    d_priors = [lam * g for _, lam in priors]
    d_lams = np.array([np.vdot(g, yi - y_star).real for yi, _ in priors])
    out = LinearDcGrads(d_priors, d_lams, cg_iters=res.iters)
    if want_k or want_coils:
        ag = acq.forward(g)
        if want_k:
            out.k = ag
        if want_coils:
            resid = acq.forward(y_star) - acq._kmask * k
            term = ifft2c(resid) * g.conj()[:, None] + ifft2c(ag) * y_star.conj()[:, None]
            out.coils = -np.sum(term, axis=0)
    return out
