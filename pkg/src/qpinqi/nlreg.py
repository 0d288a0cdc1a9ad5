"""Non-linear regression layer.

Forward: minimize, independently at every pixel,
``F(p) = ||q(p) - y||^2 + lam ||p - p_reg||^2`` with box constraints, using L-BFGS
in the unconstrained variables ``u`` of :class:`~qpinqi.sigmodel.Bounds`. All pixels
are solved together with vectorized per-pixel memories and line searches.

Backward: implicit differentiation at the solution. With ``H`` the per-pixel
Hessian of ``F`` and ``g = H^{-1} dL/dp*``:

* ``dL/dp_reg = 2 lam g``
* ``dL/dlam = -2 <p* - p_reg, g>``
* ``dL/dy = 2 J(p*) g`` (complex gradient, see :mod:`qpinqi.core`)

The module also holds the unrolled gradient-descent alternative used for
comparison, with its exact reverse-mode derivative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import SolverError
from .lindc import cg_solve
from .sigmodel import Bounds, objective_grad, objective_hessian, objective_value_grad

log = logging.getLogger(__name__)


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 50
    gtol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 20

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be at least 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")


@dataclass
class NlRegInfo:
    iterations: int
    converged: np.ndarray
    linesearch_failed: np.ndarray
    grad_norm: np.ndarray
    objective: np.ndarray
    history: list = field(default_factory=list)
    u: np.ndarray | None = None

    @property
    def stationary(self):
        """Per-pixel flag: gradient norm below ``1e-4 (1 + |F|)``."""
        return self.grad_norm <= 1e-4 * (1.0 + np.abs(self.objective))


def _cubic_min(a, fa, da, b, fb, db):
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        d1 = da + db - 3.0 * (fa - fb) / (a - b)
        disc = d1 * d1 - da * db
        d2 = np.sign(b - a) * np.sqrt(disc)
        t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    w = hi - lo
    bad = ~np.isfinite(t) | (disc < 0) | (t < lo + 0.1 * w) | (t > hi - 0.1 * w)
    return np.where(bad, 0.5 * (a + b), t)


def _strong_wolfe(evaluate, f0, d0, alpha0, c1, c2, max_trials):
    """Vectorized strong-Wolfe line search (bracketing then cubic zoom).

    ``evaluate(alpha, idx)`` returns objective, directional derivative and full
    gradient for the problems ``idx`` at their step lengths ``alpha``.
    """
    n = f0.size
    phase = np.zeros(n, dtype=np.int8)  # 0 bracket, 1 zoom, 2 done, 3 failed
    a_prev = np.zeros(n)
    f_prev = f0.copy()
    d_prev = d0.copy()
    a_cur = alpha0.copy()
    lo = np.zeros(n)
    f_lo = f0.copy()
    d_lo = d0.copy()
    hi = np.zeros(n)
    f_hi = f0.copy()
    d_hi = d0.copy()
    a_acc = np.zeros(n)
    f_acc = f0.copy()
    g_acc = None
    best_a = np.zeros(n)
    best_f = f0.copy()
    best_g = None
    first = np.ones(n, dtype=bool)

    for _ in range(max_trials):
        idx = np.flatnonzero(phase < 2)
        if idx.size == 0:
            break
        zoom = phase[idx] == 1
        trial = np.where(zoom, _cubic_min(lo[idx], f_lo[idx], d_lo[idx], hi[idx], f_hi[idx], d_hi[idx]),
                         a_cur[idx])
        f, d, g = evaluate(trial, idx)
        if g_acc is None:
            g_acc = np.zeros((g.shape[0], n))
            best_g = np.zeros((g.shape[0], n))
        if not np.all(np.isfinite(f)):
            f = np.where(np.isfinite(f), f, np.inf)
            d = np.where(np.isfinite(d), d, np.inf)
        armijo = f <= f0[idx] + c1 * trial * d0[idx]
        # approximate Wolfe test once decreases drop below rounding level
        armijo |= (f <= f0[idx] + 1e-13 * np.abs(f0[idx])) & (d <= (1.0 - 2.0 * c1) * -d0[idx])
        better = armijo & (f < best_f[idx])
        bi = idx[better]
        best_a[bi], best_f[bi], best_g[:, bi] = trial[better], f[better], g[:, better]
        curv = np.abs(d) <= -c2 * d0[idx]

        # bracketing phase
        b = ~zoom
        up = b & (~armijo | (~first[idx] & (f >= f_prev[idx])))
        ok = b & ~up & curv
        down = b & ~up & ~ok & (d >= 0)
        grow = b & ~up & ~ok & ~down
        i = idx[up]
        lo[i], f_lo[i], d_lo[i] = a_prev[i], f_prev[i], d_prev[i]
        hi[i], f_hi[i], d_hi[i] = trial[up], f[up], d[up]
        phase[i] = 1
        i = idx[down]
        lo[i], f_lo[i], d_lo[i] = trial[down], f[down], d[down]
        hi[i], f_hi[i], d_hi[i] = a_prev[i], f_prev[i], d_prev[i]
        phase[i] = 1
        i = idx[grow]
        a_prev[i], f_prev[i], d_prev[i] = trial[grow], f[grow], d[grow]
        a_cur[i] = 2.0 * trial[grow]
        first[idx[b]] = False

        # zoom phase
        zhi = zoom & (~armijo | (f >= f_lo[idx]))
        zok = zoom & ~zhi & curv
        zmove = zoom & ~zhi & ~zok
        i = idx[zhi]
        hi[i], f_hi[i], d_hi[i] = trial[zhi], f[zhi], d[zhi]
        flip = zmove & (d * (hi[idx] - lo[idx]) >= 0)
        i = idx[flip]
        hi[i], f_hi[i], d_hi[i] = lo[i], f_lo[i], d_lo[i]
        i = idx[zmove]
        lo[i], f_lo[i], d_lo[i] = trial[zmove], f[zmove], d[zmove]

        done = ok | zok
        i = idx[done]
        a_acc[i], f_acc[i], g_acc[:, i] = trial[done], f[done], g[:, done]
        phase[i] = 2
        # a collapsed bracket cannot improve further
        stuck = (phase[idx] == 1) & (np.abs(hi[idx] - lo[idx]) <= 1e-14 * np.maximum(1.0, np.abs(lo[idx])))
        phase[idx[stuck]] = 3

    failed = phase != 2
    return a_acc, f_acc, g_acc, failed, best_a, best_f, best_g


def lbfgs_pixelwise(fun, u0, cfg: LbfgsConfig):
    """Minimize independent objectives, one per column of ``u0`` (shape ``(n, P)``).

    ``fun(u, idx)`` returns values ``(len(idx),)`` and gradients ``(n, len(idx))`` for
    the problems ``idx`` evaluated at ``u`` of shape ``(n, len(idx))``.
    """
    u = np.array(u0, dtype=float)
    n, npx = u.shape
    allidx = np.arange(npx)
    f, g = fun(u, allidx)
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(g)):
        raise SolverError("non-finite objective at the starting point")
    m = cfg.memory
    S = np.zeros((m, n, npx))
    Y = np.zeros((m, n, npx))
    rho = np.zeros((m, npx))
    gamma = np.zeros(npx)
    has_pair = np.zeros(npx, dtype=bool)
    failed = np.zeros(npx, dtype=bool)
    # first-step length for pixels without curvature pairs; shrunk on line-search failure
    first_step = np.ones(npx)
    retries = np.zeros(npx, dtype=int)
    history = [float(f.sum())]
    it = 0
    for it in range(1, cfg.max_iter + 1):
        gnorm = np.sqrt(np.sum(g * g, axis=0))
        active = (gnorm > cfg.gtol) & ~failed
        idx = np.flatnonzero(active)
        if idx.size == 0:
            it -= 1
            break
        ga = g[:, idx]
        # two-loop recursion, newest pair first
        q = ga.copy()
        alphas = []
        filled = min(it - 1, m)
        slots = [(it - 2 - j) % m for j in range(filled)]
        for s in slots:
            a = rho[s, idx] * np.sum(S[s][:, idx] * q, axis=0)
            q -= a * Y[s][:, idx]
            alphas.append(a)
        scale = np.where(has_pair[idx], gamma[idx], first_step[idx] / np.maximum(gnorm[idx], 1e-300))
        r = scale * q
        for s, a in zip(reversed(slots), reversed(alphas)):
            beta = rho[s, idx] * np.sum(Y[s][:, idx] * r, axis=0)
            r += (a - beta) * S[s][:, idx]
        d = -r
        slope = np.sum(ga * d, axis=0)
        reset = ~(slope < 0)
        if np.any(reset):
            d[:, reset] = -ga[:, reset] / np.maximum(gnorm[idx][reset], 1e-300)
            slope[reset] = np.sum(ga[:, reset] * d[:, reset], axis=0)
            rho[:, idx[reset]] = 0.0
            has_pair[idx[reset]] = False

        def evaluate(alpha, sub, d=d, idx=idx):
            cols = idx[sub]
            ut = u[:, cols] + alpha * d[:, sub]
            ft, gt = fun(ut, cols)
            return ft, np.sum(gt * d[:, sub], axis=0), gt

        a_acc, f_acc, g_acc, ls_fail, best_a, best_f, best_g = _strong_wolfe(
            evaluate, f[idx], slope, np.ones(idx.size), cfg.c1, cfg.c2, cfg.max_trials)

        # fall back to the best sufficient-decrease trial on failure
        use_best = ls_fail & (best_f < f[idx])
        a_acc = np.where(use_best, best_a, a_acc)
        f_acc = np.where(use_best, best_f, f_acc)
        g_acc[:, use_best] = best_g[:, use_best]
        moved = ~ls_fail | use_best
        stalled = idx[ls_fail & ~use_best]
        if stalled.size:
            # restart from steepest descent with a much shorter first step
            again = retries[stalled] < 3
            retry = stalled[again]
            retries[retry] += 1
            first_step[retry] *= 1e-4
            rho[:, retry] = 0.0
            has_pair[retry] = False
            failed[stalled[~again]] = True
            log.debug("line search failed on %d pixels", int(stalled.size))

        mi = idx[moved]
        step = a_acc[moved] * d[:, moved]
        ynew = g_acc[:, moved] - g[:, mi]
        sy = np.sum(step * ynew, axis=0)
        yy = np.sum(ynew * ynew, axis=0)
        good = sy > 1e-12 * np.sqrt(np.sum(step * step, axis=0) * yy)
        slot = (it - 1) % m
        S[slot][:, mi] = step
        Y[slot][:, mi] = ynew
        rho[slot, mi] = np.where(good, 1.0 / np.where(good, sy, 1.0), 0.0)
        gamma[mi] = np.where(good, sy / np.where(good, yy, 1.0), gamma[mi])
        has_pair[mi] |= good
        # pixels that did not move keep an inert slot
        rho[slot, idx[~moved]] = 0.0
        u[:, mi] += step
        f[mi] = f_acc[moved]
        g[:, mi] = g_acc[:, moved]
        history.append(float(f.sum()))
        if not np.all(np.isfinite(f)):
            raise SolverError("non-finite objective during L-BFGS")
    gnorm = np.sqrt(np.sum(g * g, axis=0))
    return u, f, gnorm, gnorm <= cfg.gtol, failed, it, history


def nlreg_forward(model, y, p_reg, lam, p_init, bounds: Bounds | None = None,
                  cfg: LbfgsConfig | None = None):
    """Solve the bounded pixelwise regression.

    Parameters
    ----------
    model : SignalModel
    y : ndarray, complex ``(n_images, *grid)``
        Image series to fit.
    p_reg : ndarray or None
        Prior parameter maps; unused when ``lam == 0``.
    lam : float
        Prior weight, ``>= 0``.
    p_init : ndarray
        Starting point; clipped into the bounds.

    Returns
    -------
    p : ndarray ``(n_params, *grid)``
    info : NlRegInfo
    """
    cfg = cfg or LbfgsConfig()
    bounds = bounds or Bounds()
    if lam < 0:
        raise ValueError("prior weight must be non-negative")
    y = np.asarray(y)
    grid = y.shape[1:]
    npar = model.n_params
    yf = y.reshape(y.shape[0], -1)
    pr = None if p_reg is None else np.asarray(p_reg, dtype=float).reshape(npar, -1)
    if lam and pr is None:
        raise ValueError("p_reg is required when lam > 0")
    x0 = bounds.clip_inside(np.asarray(p_init, dtype=float).reshape(npar, -1))
    u0 = bounds.invert(x0)

    def fun(u, idx):
        x = bounds.apply(u)
        yy = yf[:, idx]
        px = pr[:, idx] if pr is not None else None
        val, grad = objective_value_grad(model, x, yy, px, lam)
        return val, grad * bounds.dxdu(u)

    u, f, gnorm, conv, failed, its, hist = lbfgs_pixelwise(fun, u0, cfg)
    p = bounds.apply(u).reshape((npar,) + grid)
    info = NlRegInfo(its, conv.reshape(grid), failed.reshape(grid), gnorm.reshape(grid),
                     f.reshape(grid), hist, u.reshape((npar,) + grid))
    if not np.all(info.stationary):
        log.warning("non-linear solver: %d pixels not stationary", int(np.sum(~info.stationary)))
    return p, info


@dataclass
class NlRegGrads:
    y: np.ndarray
    p_reg: np.ndarray | None
    lam: float | None
    fallback: np.ndarray


def _pd_solve(h, rhs, gn):
    """Solve per-pixel systems ``h x = rhs``; non positive-definite blocks use ``gn``.

    ``h`` and ``gn`` have shape ``(n, n, P)``, ``rhs`` ``(n, P)``.
    """
    hb = np.moveaxis(h, -1, 0)
    evals = np.linalg.eigvalsh(hb)
    tiny = 1e-12 * np.maximum(np.abs(evals).max(axis=1), 1e-300)
    bad = evals.min(axis=1) <= tiny
    if np.any(bad):
        gb = np.moveaxis(gn, -1, 0)[bad]
        ridge = 1e-9 * np.trace(gb, axis1=1, axis2=2) + 1e-12
        hb = hb.copy()
        hb[bad] = gb + ridge[:, None, None] * np.eye(h.shape[0])
    x = np.linalg.solve(hb, np.moveaxis(rhs, -1, 0)[..., None])[..., 0]
    return np.moveaxis(x, 0, -1), bad


def nlreg_backward(model, y, p_reg, lam, p_star, dp, method: str = "blockwise",
                   space: str = "x", bounds: Bounds | None = None, cg_tol: float = 1e-10,
                   cg_max_iter: int = 1000, u_star=None) -> NlRegGrads:
    """Implicit gradients of :func:`nlreg_forward` for the loss gradient ``dp`` at ``p_star``.

    ``method="blockwise"`` solves the 3x3 pixel systems directly, ``"cg"`` runs CG on
    the whole Hessian (same answer; it is the path for models that do not
    decouple per pixel). ``space="u"`` differentiates in the unconstrained
    variables of ``bounds`` instead and chains back; at a stationary interior
    point both agree, and only the ``u`` form stays valid for coordinates pinned
    at a bound (their gradient vanishes). Pass the solver's ``u_star``
    (``NlRegInfo.u``) there; recovering it from ``p_star`` loses precision near
    the edges.
    """
    y = np.asarray(y)
    grid = y.shape[1:]
    npar = model.n_params
    yf = y.reshape(y.shape[0], -1)
    ps = np.asarray(p_star, dtype=float).reshape(npar, -1)
    dpf = np.asarray(dp, dtype=float).reshape(npar, -1)
    h = objective_hessian(model, ps, yf, lam, exact=True)
    gn = objective_hessian(model, ps, yf, lam, exact=False)
    if space == "u":
        bounds = bounds or Bounds()
        if u_star is not None:
            u = np.asarray(u_star, dtype=float).reshape(npar, -1)
        else:
            u = bounds.invert(bounds.clip_inside(ps, 1e-15))
        dxdu = bounds.dxdu(u)
        d2x = bounds.apply(u) - ((bounds.lo + bounds.hi) / 2)[:, None]
        grad = objective_grad(model, ps, yf, None if p_reg is None else np.asarray(p_reg).reshape(npar, -1), lam)
        h = dxdu[:, None] * h * dxdu[None, :]
        idx = np.arange(npar)
        h[idx, idx] -= grad * d2x
        gn = dxdu[:, None] * gn * dxdu[None, :]
        rhs = dxdu * dpf
    elif space == "x":
        rhs = dpf
    else:
        raise ValueError(f"unknown space {space!r}")

    if method == "blockwise":
        g, bad = _pd_solve(h, rhs, gn)
    elif method == "cg":
        res = cg_solve(lambda v: np.einsum("ab...,b...->a...", h, v), rhs, cg_tol, cg_max_iter)
        g, bad = res.x, np.zeros(rhs.shape[1], dtype=bool)
    else:
        raise ValueError(f"unknown method {method!r}")
    if space == "u":
        g = dxdu * g
    jac = model.jacobian(ps)
    dy = 2.0 * np.einsum("ic...,c...->i...", jac, g)
    if lam:
        pr = np.asarray(p_reg, dtype=float).reshape(npar, -1)
        d_preg = (2.0 * lam * g).reshape((npar,) + grid)
        d_lam = float(-2.0 * np.sum((ps - pr) * g))
    else:
        d_preg, d_lam = None, None
    return NlRegGrads(dy.reshape(y.shape), d_preg, d_lam, bad.reshape(grid))


# unrolled gradient descent (comparison mode)

def gd_forward(model, y, p_reg, lam, p_init, step: float, n_steps: int):
    """``n_steps`` of plain gradient descent on the regression objective.

    Returns the final iterate and the list of iterates (needed by the backward pass).
    """
    p = np.asarray(p_init, dtype=float)
    iterates = [p]
    for _ in range(n_steps):
        p = p - step * objective_grad(model, p, y, p_reg, lam)
        if not np.all(np.isfinite(p)):
            raise SolverError("gradient descent diverged")
        iterates.append(p)
    return p, iterates


def gd_backward(model, y, p_reg, lam, iterates, step: float, dp):
    """Reverse-mode derivative of :func:`gd_forward`.

    Returns a dict with gradients for ``y``, ``p_reg``, ``lam``, ``step`` and ``p_init``.
    """
    v = np.asarray(dp, dtype=float)
    d_y = np.zeros(np.shape(y), dtype=complex)
    d_preg = np.zeros_like(v)
    d_lam = 0.0
    d_step = 0.0
    for p in reversed(iterates[:-1]):
        grad = objective_grad(model, p, y, p_reg, lam)
        d_step -= float(np.sum(grad * v))
        jv = model.jvp(p, v)
        d_y += 2.0 * step * jv
        if lam:
            d_preg += 2.0 * step * lam * v
            d_lam -= 2.0 * step * float(np.sum((p - p_reg) * v))
        h = objective_hessian(model, p, y, lam, exact=True)
        v = v - step * np.einsum("ab...,b...->a...", h, v)
    return {"y": d_y, "p_reg": d_preg, "lam": d_lam, "step": d_step, "p_init": v}
