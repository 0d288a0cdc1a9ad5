"""Pixelwise signal models mapping parameter maps to image series.

Parameter maps are real arrays of shape ``(n_params, *grid)``; image series are
complex arrays of shape ``(n_images, *grid)``. The saturation-recovery model has
channels ``(Re M0, Im M0, R1)`` and images ``M0 * (1 - exp(-tau_i * R1))``.

A signal model provides ``forward``, ``jacobian`` and ``second_order``; the
directional derivatives and the regression objective used by the non-linear
solver are built on those three.
"""

from __future__ import annotations

import numpy as np

RE_M0, IM_M0, R1 = 0, 1, 2


class SignalModel:
    """Base class of pixelwise signal models.

    Subclasses set ``n_params`` and ``n_images`` and implement ``forward``,
    ``jacobian`` (shape ``(n_images, n_params, *grid)``) and ``second_order``.
    """

    n_params: int
    n_images: int

    def forward(self, p):
        raise NotImplementedError

    def jacobian(self, p):
        raise NotImplementedError

    def second_order(self, p, w):
        """Return ``sum_i Re(conj(w_i) d2q_i/dp_a dp_b)`` with shape ``(n, n, *grid)``."""
        raise NotImplementedError

    def forward_and_jacobian(self, p):
        return self.forward(p), self.jacobian(p)

    def jvp(self, p, dp):
        jac = self.jacobian(p)
        return np.einsum("ic...,c...->i...", jac, dp)

    def vjp(self, p, dy):
        """Gradient of ``Re<dy, q(p)>`` with respect to ``p``."""
        jac = self.jacobian(p)
        return np.einsum("ic...,i...->c...", jac.conj(), dy).real

    def initial_guess(self, y):
        raise NotImplementedError

    def initial_guess_vjp(self, y, dp):
        raise NotImplementedError


class SaturationRecovery(SignalModel):
    """Saturation recovery ``q_i = M0 (1 - exp(-tau_i R1))``.

    Parameters
    ----------
    taus : sequence of float
        Saturation recovery times in seconds, strictly positive and increasing.
    r1_grid : array_like, optional
        R1 values (1/s) scanned by :meth:`initial_guess`.
    temperature : float
        Softness of the grid search in :meth:`initial_guess`.
    """

    n_params = 3

    def __init__(self, taus, r1_grid=None, temperature: float = 2e-4):
        taus = np.asarray(taus, dtype=float).ravel()
        if taus.size == 0 or np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
            raise ValueError("taus must be positive and strictly increasing")
        self.taus = taus
        self.n_images = taus.size
        if r1_grid is None:
            r1_grid = np.geomspace(0.1, 10.0, 64)
        self.r1_grid = np.asarray(r1_grid, dtype=float)
        self.temperature = float(temperature)

    def _tau(self, ndim):
        return self.taus.reshape((-1,) + (1,) * ndim)

    def forward(self, p):
        p = np.asarray(p, dtype=float)
        m0 = p[RE_M0] + 1j * p[IM_M0]
        return m0 * -np.expm1(-self._tau(m0.ndim) * p[R1])

    def jacobian(self, p):
        p = np.asarray(p, dtype=float)
        m0 = p[RE_M0] + 1j * p[IM_M0]
        tau = self._tau(m0.ndim)
        decay = np.exp(-tau * p[R1])
        recovery = -np.expm1(-tau * p[R1])
        jac = np.empty((self.n_images, 3) + m0.shape, dtype=complex)
        jac[:, RE_M0] = recovery
        jac[:, IM_M0] = 1j * recovery
        jac[:, R1] = m0 * tau * decay
        return jac

    def forward_and_jacobian(self, p):
        p = np.asarray(p, dtype=float)
        m0 = p[RE_M0] + 1j * p[IM_M0]
        tau = self._tau(m0.ndim)
        decay = np.exp(-tau * p[R1])
        recovery = -np.expm1(-tau * p[R1])
        jac = np.empty((self.n_images, 3) + m0.shape, dtype=complex)
        jac[:, RE_M0] = recovery
        jac[:, IM_M0] = 1j * recovery
        jac[:, R1] = m0 * tau * decay
        return m0 * recovery, jac

    def second_order(self, p, w):
        p = np.asarray(p, dtype=float)
        m0 = p[RE_M0] + 1j * p[IM_M0]
        tau = self._tau(m0.ndim)
        b = tau * np.exp(-tau * p[R1])
        wc = np.conj(w)
        out = np.zeros((3, 3) + m0.shape)
        cross_re = np.sum((wc * b).real, axis=0)
        cross_im = np.sum((wc * 1j * b).real, axis=0)
        out[RE_M0, R1] = out[R1, RE_M0] = cross_re
        out[IM_M0, R1] = out[R1, IM_M0] = cross_im
        out[R1, R1] = np.sum((wc * (-m0 * tau * b)).real, axis=0)
        return out

    # soft grid search: a smooth pixelwise starting estimate from images

    def _grid_terms(self, y):
        a = -np.expm1(-np.outer(self.r1_grid, self.taus))  # (K, n_images)
        norm = np.sum(a * a, axis=1)[:, None]
        flat = y.reshape(y.shape[0], -1)
        br, bi = a @ flat.real, a @ flat.imag
        energy = np.sum(flat.real ** 2 + flat.imag ** 2, axis=0)
        res = energy - (br * br + bi * bi) / norm
        scale = self.temperature * (energy + 1e-8)
        s = res * (-1.0 / scale)
        s -= s.max(axis=0)
        w = np.exp(s)
        w /= w.sum(axis=0)
        return a, norm, br, bi, energy, res, scale, w

    def initial_guess(self, y):
        """Pixelwise estimate from a softmin-weighted scan over ``r1_grid``.

        For each grid value the best M0 has a closed form; the residuals become
        softmax weights and the estimate is the weighted mean. The map is smooth
        in ``y`` and has an exact gradient (:meth:`initial_guess_vjp`).
        """
        y = np.asarray(y, dtype=complex)
        _, norm, br, bi, _, _, _, w = self._grid_terms(y)
        wn = w / norm
        out = np.stack([np.sum(wn * br, axis=0), np.sum(wn * bi, axis=0), self.r1_grid @ w])
        return out.reshape((3,) + y.shape[1:])

    def initial_guess_vjp(self, y, dp):
        y = np.asarray(y, dtype=complex)
        a, norm, br, bi, energy, res, scale, w = self._grid_terms(y)
        dp = np.asarray(dp, dtype=float).reshape(3, -1)
        dmr, dmi = dp[RE_M0], dp[IM_M0]
        c = np.outer(self.r1_grid, dp[R1]) + (dmr * br + dmi * bi) / norm
        e = w * (c - np.sum(w * c, axis=0))
        kappa = np.sum(e, axis=0) * (-1.0 / scale) + np.sum(e * res, axis=0) / (scale * (energy + 1e-8))
        f = 2.0 * e / (norm * scale)
        wn = w / norm
        beta_r = f * br + wn * dmr
        beta_i = f * bi + wn * dmi
        flat = y.reshape(y.shape[0], -1)
        out = 2.0 * kappa * flat + (a.T @ beta_r + 1j * (a.T @ beta_i))
        return out.reshape(y.shape)


class LinearSignalModel(SignalModel):
    """Linear model ``q(p) = M p`` at every pixel, ``M`` complex ``(n_images, n_params)``."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=complex)
        self.n_images, self.n_params = self.matrix.shape

    def forward(self, p):
        return np.tensordot(self.matrix, np.asarray(p, dtype=float), axes=(1, 0))

    def jacobian(self, p):
        grid = np.shape(p)[1:]
        return np.broadcast_to(self.matrix.reshape(self.matrix.shape + (1,) * len(grid)),
                               self.matrix.shape + grid)

    def second_order(self, p, w):
        return np.zeros((self.n_params, self.n_params) + np.shape(p)[1:])

    def _normal(self):
        return (self.matrix.conj().T @ self.matrix).real

    def initial_guess(self, y):
        rhs = np.tensordot(self.matrix.conj().T, y, axes=(1, 0)).real
        return np.tensordot(np.linalg.inv(self._normal()), rhs, axes=(1, 0))

    def initial_guess_vjp(self, y, dp):
        v = np.tensordot(np.linalg.inv(self._normal()), dp, axes=(1, 0))
        return np.tensordot(self.matrix, v, axes=(1, 0))


# regression objective  F(p) = ||q(p) - y||^2 + lam ||p - p_reg||^2, per pixel

def objective(model, p, y, p_reg, lam):
    """Per-pixel value of the regularized regression objective."""
    r = model.forward(p) - y
    val = np.sum(np.abs(r) ** 2, axis=0)
    if lam:
        val = val + lam * np.sum((p - p_reg) ** 2, axis=0)
    return val


def objective_grad(model, p, y, p_reg, lam):
    r = model.forward(p) - y
    g = 2.0 * model.vjp(p, r)
    if lam:
        g = g + 2.0 * lam * (p - p_reg)
    return g


def objective_value_grad(model, p, y, p_reg, lam):
    """Objective and gradient from one model evaluation."""
    q, jac = model.forward_and_jacobian(p)
    r = q - y
    val = np.sum(r.real ** 2 + r.imag ** 2, axis=0)
    g = 2.0 * np.sum((jac.conj() * r[:, None]).real, axis=0)
    if lam:
        d = p - p_reg
        val = val + lam * np.sum(d * d, axis=0)
        g = g + 2.0 * lam * d
    return val, g


def objective_hessian(model, p, y, lam, exact: bool = True):
    """Per-pixel Hessian blocks of the objective, shape ``(n, n, *grid)``.

    ``exact=False`` drops the second-derivative terms of the model (Gauss-Newton).
    """
    jac = model.jacobian(p)
    h = 2.0 * np.einsum("ia...,ib...->ab...", jac.conj(), jac).real
    if exact:
        h = h + 2.0 * model.second_order(p, model.forward(p) - y)
    if lam:
        idx = np.arange(model.n_params)
        h[idx, idx] += 2.0 * lam
    return h


def objective_hvp(model, p, y, lam, dp, exact: bool = True):
    h = objective_hessian(model, p, y, lam, exact=exact)
    return np.einsum("ab...,b...->a...", h, dp)


class Bounds:
    """Box constraints enforced through ``x = mid + half * sin(u)``.

    Defaults are Re M0, Im M0 in (-2, 2) and R1 in (-1, 20) 1/s.
    """

    def __init__(self, lo=(-2.0, -2.0, -1.0), hi=(2.0, 2.0, 20.0)):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("bounds need lo < hi per channel")

    def _mid_half(self, ndim):
        shape = (-1,) + (1,) * ndim
        return ((self.lo + self.hi) / 2).reshape(shape), ((self.hi - self.lo) / 2).reshape(shape)

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        mid, half = self._mid_half(u.ndim - 1)
        return mid + half * np.sin(u)

    def dxdu(self, u):
        u = np.asarray(u, dtype=float)
        _, half = self._mid_half(u.ndim - 1)
        return half * np.cos(u)

    def invert(self, x):
        """Principal-branch inverse; ``x`` must lie strictly inside the box."""
        x = np.asarray(x, dtype=float)
        mid, half = self._mid_half(x.ndim - 1)
        z = (x - mid) / half
        if not np.all(np.abs(z) < 1.0):
            raise ValueError("values on or outside the bounds cannot be inverted")
        return np.arcsin(z)

    def clip_inside(self, x, margin: float = 1e-6):
        """Clip into the box, keeping a relative ``margin`` from the edges."""
        x = np.asarray(x, dtype=float)
        mid, half = self._mid_half(x.ndim - 1)
        return np.clip(x, mid - half * (1 - margin), mid + half * (1 - margin))
