"""Unrolled half-quadratic splitting between image and parameter estimates.

One iteration ``i`` of the network:

1. ``y_reg = Y(y_{i-1}, i)`` from the image prior network,
2. ``y_i`` from the linear data-consistency layer with priors
   ``(q(p_{i-1}), lam_q)`` (skipped at ``i = 1``) and ``(y_reg, lam_y)``,
3. ``p_reg = P(y_i, i)`` from the parameter prior network,
4. ``p_i`` from the non-linear regression layer with prior ``(p_reg, lam_p)``,
   started at ``p_reg`` for ``i = 1`` and at ``p_{i-1}`` afterwards.

``y_0`` is the zero-filled adjoint ``A^H k``. :func:`pinqi_backward` sweeps the
iterations in reverse and chains the implicit gradients of both layers, the
prior networks and the weight reparametrization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import SolverError, make_rng
from .lindc import CgConfig, lindc_backward, lindc_forward
from .nlreg import LbfgsConfig, gd_backward, gd_forward, nlreg_backward, nlreg_forward
from .regnet import (ConvPrior, ModelState, lambda_effective, lambda_effective_grad,
                     lambda_init_invert)
from .sigmodel import R1, Bounds

ABLATIONS = {
    "full": {},
    "a": {"use_signal_model": False, "final_regression": False},
    "b": {"use_image_prior": False},
    "c": {"use_param_prior": False},
    "d": {"use_nonlinear_solver": False},
    "e": {"use_nonlinear_solver": False, "gd_steps": 5},
    "f": {"fixed_priors_once": True},
    "g1": {"n_iter": 1},
    "g2": {"n_iter": 2},
    "h": {"use_signal_model": False, "use_param_prior": False, "final_regression": True,
          "loss_target": "images"},
    "i": {"use_signal_model": False, "use_param_prior": False, "final_regression": True},
}
ABLATION_ALIASES = {
    "no_signal_function": "a", "no_image_reg": "b", "no_param_reg": "c",
    "no_nonlinear_solver": "d", "gradient_descent": "e", "fixed_priors": "f",
    "single_iteration": "g1", "two_iterations": "g2", "separate_regression": "h",
    "end_to_end_regression": "i",
}


@dataclass
class PinqiConfig:
    """Network layout, initial weights, solver settings and ablation switches."""

    n_iter: int = 5
    lambda_p: float = 3.0
    lambda_y: float = 0.1
    lambda_q: tuple = (0.1, 0.05)  # lam_q at iteration i is a + b * i
    use_image_prior: bool = True
    use_param_prior: bool = True
    use_nonlinear_solver: bool = True
    use_signal_model: bool = True
    final_regression: bool = False
    fixed_priors_once: bool = False
    gd_steps: int = 0
    gd_step_init: float = 0.05
    hidden: int = 8
    loss_target: str = "params"
    # "equal": plain MSE on (Re M0, Im M0, R1); "t1": R1 error scaled by T1_true^2,
    # a first-order T1 error in seconds
    loss_weighting: str = "equal"
    deep_supervision: float = 0.05
    cg: CgConfig = field(default_factory=CgConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    bounds_lo: tuple = (-2.0, -2.0, -1.0)
    bounds_hi: tuple = (2.0, 2.0, 20.0)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if self.gd_steps and self.use_nonlinear_solver:
            raise ValueError("gradient-descent inner steps replace the non-linear solver")
        if not self.use_nonlinear_solver and not self.gd_steps and not self.use_param_prior:
            raise ValueError("without a non-linear solver the parameter prior is required")
        if not self.use_signal_model:
            if not self.use_image_prior:
                raise ValueError("image-only reconstruction needs the image prior")
            if not self.final_regression and not self.use_param_prior:
                raise ValueError("image-only reconstruction needs a parameter prior or a final regression")
        elif self.final_regression:
            raise ValueError("final_regression only applies without the signal-model coupling")
        if self.loss_target not in ("params", "images"):
            raise ValueError(f"unknown loss target {self.loss_target!r}")
        if self.loss_weighting not in ("equal", "t1", "t1exact"):
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")
        if self.loss_target == "images" and self.use_signal_model:
            raise ValueError("image loss is only defined for image-only reconstruction")

    @classmethod
    def ablation(cls, name, **overrides):
        name = ABLATION_ALIASES.get(name, name)
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        return cls(**{**ABLATIONS[name], **overrides})

    @property
    def bounds(self):
        return Bounds(self.bounds_lo, self.bounds_hi)

    def initial_lambdas(self):
        it = np.arange(1, self.n_iter + 1)
        a, b = self.lambda_q
        targets = np.stack([np.full(self.n_iter, self.lambda_p), np.full(self.n_iter, self.lambda_y),
                            a + b * it])
        return lambda_init_invert(targets)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (CgConfig, LbfgsConfig)):
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "cg" in d and isinstance(d["cg"], dict):
            d["cg"] = CgConfig(**d["cg"])
        if "lbfgs" in d and isinstance(d["lbfgs"], dict):
            d["lbfgs"] = LbfgsConfig(**d["lbfgs"])
        for key in ("lambda_q", "bounds_lo", "bounds_hi"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def needs_image_prior(self):
        return self.use_image_prior

    def needs_param_prior(self):
        if self.use_signal_model:
            return self.use_param_prior
        return not self.final_regression


def init_state(cfg: PinqiConfig, n_images: int, seed: int = 0) -> ModelState:
    """Fresh model state: weights at their initial targets, priors equal to identity."""
    priors = {}
    if cfg.needs_image_prior():
        priors["y"] = ConvPrior(2 * n_images, 2 * n_images, cfg.n_iter, cfg.hidden, make_rng(seed, 1))
    if cfg.needs_param_prior():
        priors["p"] = ConvPrior(3 + 2 * n_images, 3, cfg.n_iter, cfg.hidden, make_rng(seed, 2))
    steps = lambda_init_invert(np.full(cfg.n_iter, cfg.gd_step_init))
    return ModelState(cfg.initial_lambdas(), steps, priors)


# prior networks on complex images

def image_prior_apply(prior, y, iteration):
    x = np.concatenate([y.real, y.imag])
    out, cache = prior.forward(x, iteration)
    n = y.shape[0]
    return out[:n] + 1j * out[n:], cache


def image_prior_backward(prior, cache, dout):
    dx, grads = prior.backward(cache, np.concatenate([dout.real, dout.imag]))
    n = dout.shape[0]
    return dx[:n] + 1j * dx[n:], grads


def param_prior_apply(prior, model, y, iteration):
    base = model.initial_guess(y)
    x = np.concatenate([base, y.real, y.imag])
    out, cache = prior.forward(x, iteration)
    return out, (cache, y)


def param_prior_backward(prior, model, cache, dout):
    inner, y = cache
    dx, grads = prior.backward(inner, dout)
    n = y.shape[0]
    dy = model.initial_guess_vjp(y, dx[:3]) + dx[3:3 + n] + 1j * dx[3 + n:]
    return dy, grads


@dataclass
class UnrolledTrace:
    ys: list
    ps: list
    lams: np.ndarray
    y_regs: list
    p_regs: list
    dc_priors: list
    caches: dict
    diagnostics: list
    p_final: np.ndarray
    steps: np.ndarray | None = None


def pinqi_reconstruct(k, acq, model, state: ModelState, cfg: PinqiConfig) -> UnrolledTrace:
    """Run the unrolled network on one sample.

    Parameters
    ----------
    k : ndarray
        Measured k-space ``acq.data_shape``.
    acq : AcquisitionModel
    model : SignalModel
    state : ModelState
    cfg : PinqiConfig

    Returns
    -------
    UnrolledTrace
        Per-iteration images ``ys`` (``ys[0]`` is the zero-filled image), parameter
        maps ``ps`` (``ps[i-1]`` for iteration ``i``), effective weights, priors and
        solver diagnostics; ``p_final`` is the output.
    """
    T = cfg.n_iter
    if state.n_iter != T:
        raise ValueError(f"state has {state.n_iter} iterations, config {T}")
    lams = state.effective()
    steps = lambda_effective(state.steps)
    bounds = cfg.bounds
    yprior = state.priors.get("y")
    pprior = state.priors.get("p")
    y0 = acq.adjoint(k)
    ys = [y0]
    ps = []
    y_regs, p_regs, dc_priors, diags = [], [], [], []
    caches = {"y": [], "p": [], "inner": [], "p_init": []}

    fixed_y = fixed_p = None
    if cfg.fixed_priors_once and cfg.use_signal_model:
        if yprior is not None:
            fixed_y = image_prior_apply(yprior, y0, 1)
        if pprior is not None:
            fixed_p = param_prior_apply(pprior, model, y0, 1)

    for i in range(1, T + 1):
        lam_p, lam_y, lam_q = lams[:, i - 1]
        priors = []
        if cfg.use_signal_model and ps:
            priors.append(("q", model.forward(ps[-1]), lam_q))
        y_reg = None
        if cfg.use_image_prior:
            if fixed_y is not None:
                y_reg, ycache = fixed_y
            else:
                y_reg, ycache = image_prior_apply(yprior, ys[-1], i)
            caches["y"].append(ycache)
            priors.append(("y", y_reg, lam_y))
        else:
            caches["y"].append(None)
        y_regs.append(y_reg)
        dc_priors.append(priors)
        try:
            if priors:
                yi, dinfo = lindc_forward(k, acq, [(v, lam) for _, v, lam in priors], cfg.cg)
            else:
                yi, dinfo = y0, None
        except SolverError as exc:
            raise SolverError(str(exc), iteration=i) from exc
        ys.append(yi)
        diag = {"cg_iters": None if dinfo is None else dinfo.iters}

        if not cfg.use_signal_model:
            p_regs.append(None)
            caches["p"].append(None)
            diags.append(diag)
            continue

        p_reg = None
        if cfg.use_param_prior:
            if fixed_p is not None:
                p_reg, pcache = fixed_p
            else:
                p_reg, pcache = param_prior_apply(pprior, model, yi, i)
            caches["p"].append(pcache)
        else:
            caches["p"].append(None)
        p_regs.append(p_reg)

        if i == 1:
            p_init = p_reg if p_reg is not None else model.initial_guess(yi)
        else:
            p_init = ps[-1]
        caches["p_init"].append(p_init)
        lam = lam_p if cfg.use_param_prior else 0.0
        try:
            if cfg.use_nonlinear_solver:
                pi, ninfo = nlreg_forward(model, yi, p_reg, lam, p_init, bounds, cfg.lbfgs)
                diag.update(lbfgs_iters=ninfo.iterations, nonstationary=int(np.sum(~ninfo.stationary)))
                caches["inner"].append(ninfo.u)
            elif cfg.gd_steps:
                pi, iterates = gd_forward(model, yi, p_reg, lam, p_init, steps[i - 1], cfg.gd_steps)
                caches["inner"].append(iterates)
            else:
                pi = p_reg
                caches["inner"].append(None)
        except SolverError as exc:
            raise SolverError(str(exc), iteration=i) from exc
        ps.append(pi)
        diags.append(diag)

    if cfg.use_signal_model:
        p_final = ps[-1]
    elif cfg.final_regression:
        p_init = model.initial_guess(ys[-1])
        p_final, ninfo = nlreg_forward(model, ys[-1], None, 0.0, p_init, bounds, cfg.lbfgs)
        caches["head"] = ninfo.u
    else:
        p_final, caches["head"] = param_prior_apply(pprior, model, ys[-1], T)
    return UnrolledTrace(ys, ps, lams, y_regs, p_regs, dc_priors, caches, diags, p_final, steps)


def channel_weights(p_true, weight_mask, mode="equal"):
    """Per-channel pixel weights ``(3, ...)`` of the parameter loss."""
    w = np.repeat(np.asarray(weight_mask, dtype=float)[None], p_true.shape[0], axis=0)
    if mode == "t1":
        r1 = p_true[R1]
        t1 = np.divide(1.0, r1, out=np.zeros_like(r1), where=w[R1] > 0)
        w[R1] *= t1 ** 4
    return w


T1_LOSS_FLOOR = 0.05


def param_residual(p, p_true, mode="equal"):
    """Loss residual and its elementwise derivative w.r.t. ``p``.

    In ``t1exact`` mode the R1 channel is compared as T1 = 1/max(R1, floor).
    """
    r = p - p_true
    d = np.ones(p.shape)
    if mode == "t1exact":
        r1 = np.real(p[R1])
        safe = np.maximum(r1, T1_LOSS_FLOOR)
        t1_true = np.divide(1.0, p_true[R1], out=np.zeros(r1.shape), where=p_true[R1] > 0)
        r = r.copy()
        r[R1] = 1.0 / safe - t1_true
        d[R1] = np.where(r1 > T1_LOSS_FLOOR, -1.0 / safe ** 2, 0.0)
    return r, d


def masked_mse(a, b, weight, wsum=None):
    """Weighted mean of squared differences over pixels and channels.

    ``weight`` is a pixel mask or per-channel weights; ``wsum`` (default the
    sum of a 2D mask) normalizes by pixel count.
    """
    if wsum is None:
        wsum = float(np.sum(weight))
    diff = np.abs(a - b) ** 2
    return float(np.sum(diff * weight) / (wsum * a.shape[0]))


def pinqi_loss(trace: UnrolledTrace, p_true, weight_mask, cfg: PinqiConfig | None = None,
               y_true=None, factor: float | None = None):
    """Deep-supervision loss and its cotangents.

    ``L = mse(final) + factor * sum(mse(intermediate))`` with pixel weights
    ``weight_mask`` and equal channel weights. Returns ``(L, grads)`` where
    ``grads`` maps ``"p"`` (list per iteration), ``"p_final"`` and ``"y"`` (list)
    to cotangents.
    """
    weight_mask = np.asarray(weight_mask, dtype=float)
    if np.any(weight_mask < 0) or np.any(weight_mask > 1):
        raise ValueError("weight mask must lie in [0, 1]")
    wsum = float(np.sum(weight_mask))
    if wsum == 0:
        raise ValueError("weight mask is empty")
    cfg = cfg or PinqiConfig()
    if factor is None:
        factor = cfg.deep_supervision
    grads = {"p": [None] * len(trace.ps), "p_final": None, "y": [None] * len(trace.ys)}

    if cfg.loss_target == "images":
        if y_true is None:
            raise ValueError("image loss needs the noiseless images")
        targets = trace.ys[1:]
        n = len(targets)
        total = 0.0
        norm = wsum * y_true.shape[0]
        for j, yi in enumerate(targets, start=1):
            wgt = 1.0 if j == n else factor
            total += wgt * masked_mse(yi, y_true, weight_mask)
            grads["y"][j] = wgt * 2.0 * (yi - y_true) * weight_mask / norm
        return total, grads

    norm = wsum * p_true.shape[0]
    weight = channel_weights(p_true, weight_mask, cfg.loss_weighting)
    if cfg.use_signal_model:
        n = len(trace.ps)
        total = 0.0
        for j, pi in enumerate(trace.ps, start=1):
            wgt = 1.0 if j == n else factor
            r, d = param_residual(pi, p_true, cfg.loss_weighting)
            total += wgt * masked_mse(r, 0.0, weight, wsum)
            grads["p"][j - 1] = wgt * 2.0 * r * d * weight / norm
        return total, grads
    r, d = param_residual(trace.p_final, p_true, cfg.loss_weighting)
    total = masked_mse(r, 0.0, weight, wsum)
    grads["p_final"] = 2.0 * r * d * weight / norm
    return total, grads


def _add(store, key, value):
    if value is None:
        return
    store[key] = value if key not in store else store[key] + value


def _add_prior_grads(store, role, grads):
    for name, g in grads.items():
        _add(store, (role, name), g)


def pinqi_backward(trace: UnrolledTrace, cotangents, k, acq, model, state: ModelState,
                   cfg: PinqiConfig) -> dict:
    """Gradients of the loss with respect to every entry of ``state``.

    Returns a dict keyed like :meth:`ModelState.keys`: ``("lambdas",)``,
    ``("steps",)`` and ``(role, param)`` for the prior networks.
    """
    T = cfg.n_iter
    if len(trace.ys) != T + 1 or state.n_iter != T:
        raise ValueError("trace does not match the model state/config")
    yprior = state.priors.get("y")
    pprior = state.priors.get("p")
    out = {}
    d_lams = np.zeros((3, T))
    d_steps = np.zeros(T)
    gy = [np.zeros_like(y) for y in trace.ys]
    for j, g in enumerate(cotangents.get("y", [])):
        if g is not None:
            gy[j] = gy[j] + g
    gp = [np.zeros_like(p) if p is not None else None for p in trace.ps]
    for j, g in enumerate(cotangents.get("p", [])):
        if g is not None:
            gp[j] = gp[j] + g
    bounds = cfg.bounds
    fixed = cfg.fixed_priors_once and cfg.use_signal_model

    if not cfg.use_signal_model:
        dfinal = cotangents.get("p_final")
        if dfinal is not None and np.any(dfinal):
            if cfg.final_regression:
                nb = nlreg_backward(model, trace.ys[-1], None, 0.0, trace.p_final, dfinal,
                                    space="u", bounds=bounds, u_star=trace.caches["head"])
                gy[T] = gy[T] + nb.y
            else:
                dyh, grads = param_prior_backward(pprior, model, trace.caches["head"], dfinal)
                gy[T] = gy[T] + dyh
                _add_prior_grads(out, "p", grads)

    for i in range(T, 0, -1):
        yi = trace.ys[i]
        lam_p, lam_y, lam_q = trace.lams[:, i - 1]
        if cfg.use_signal_model:
            v = gp[i - 1]
            p_reg = trace.p_regs[i - 1]
            dpreg = None
            lam = lam_p if cfg.use_param_prior else 0.0
            if cfg.use_nonlinear_solver:
                if np.any(v):
                    nb = nlreg_backward(model, yi, p_reg, lam, trace.ps[i - 1], v, space="u",
                                        bounds=bounds, u_star=trace.caches["inner"][i - 1])
                    gy[i] = gy[i] + nb.y
                    dpreg = nb.p_reg
                    if nb.lam is not None:
                        d_lams[0, i - 1] += nb.lam
            elif cfg.gd_steps:
                gb = gd_backward(model, yi, p_reg, lam, trace.caches["inner"][i - 1], trace.steps[i - 1], v)
                gy[i] = gy[i] + gb["y"]
                dpreg = gb["p_reg"] if cfg.use_param_prior else None
                if cfg.use_param_prior:
                    d_lams[0, i - 1] += gb["lam"]
                d_steps[i - 1] += gb["step"]
                if i == 1:
                    if p_reg is not None:
                        dpreg = gb["p_init"] if dpreg is None else dpreg + gb["p_init"]
                    else:
                        gy[1] = gy[1] + model.initial_guess_vjp(yi, gb["p_init"])
                else:
                    gp[i - 2] = gp[i - 2] + gb["p_init"]
            else:
                dpreg = v
            if dpreg is not None and pprior is not None and np.any(dpreg):
                dyp, grads = param_prior_backward(pprior, model, trace.caches["p"][i - 1], dpreg)
                target = 0 if fixed else i
                gy[target] = gy[target] + dyp
                _add_prior_grads(out, "p", grads)

        priors = trace.dc_priors[i - 1]
        if not priors:
            gy[0] = gy[0] + gy[i]
            continue
        if not np.any(gy[i]):
            continue
        lb = lindc_backward(k, acq, [(v_, lam_) for _, v_, lam_ in priors], yi, gy[i], cfg.cg,
                            want_k=False)
        for (role, _, _), dprior, dlam in zip(priors, lb.priors, lb.lams):
            if role == "q":
                d_lams[2, i - 1] += dlam
                gp[i - 2] = gp[i - 2] + model.vjp(trace.ps[i - 2], dprior)
            else:
                d_lams[1, i - 1] += dlam
                dyr, grads = image_prior_backward(yprior, trace.caches["y"][i - 1], dprior)
                target = 0 if fixed else i - 1
                gy[target] = gy[target] + dyr
                _add_prior_grads(out, "y", grads)

    out[("lambdas",)] = d_lams * lambda_effective_grad(state.lambdas)
    out[("steps",)] = d_steps * lambda_effective_grad(state.steps)
    return out
