"""Central finite-difference checks of every hand-written backward pass.

Each check compares an analytic directional derivative ``Re<grad, v>`` with
``(L(x + eps v) - L(x - eps v)) / (2 eps)`` along random directions ``v`` and
reports one row per gradient family.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import make_rng
from .encoding import AcquisitionModel, normalize_coils
from .lindc import CgConfig, lindc_backward, lindc_forward
from .nlreg import LbfgsConfig, nlreg_backward, nlreg_forward
from .pinqi import PinqiConfig, init_state, pinqi_backward, pinqi_loss, pinqi_reconstruct
from .regnet import ConvPrior
from .sigmodel import SaturationRecovery

TARGETS = ("sigmodel", "prior", "lindc", "nlreg", "endtoend")
THRESHOLDS = {"sigmodel": 1e-6, "prior": 1e-5, "lindc": 1e-4, "nlreg": 1e-4, "endtoend": 1e-3}


@dataclass
class CheckRow:
    name: str
    analytic: float
    numeric: float

    @property
    def rel_error(self):
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


@dataclass
class Report:
    target: str
    threshold: float
    rows: list = field(default_factory=list)

    @property
    def max_error(self):
        return max((r.rel_error for r in self.rows), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.threshold

    def table(self):
        lines = [f"{'gradient':<28}{'analytic':>18}{'finite diff':>18}{'rel err':>12}  ok"]
        for r in self.rows:
            ok = "yes" if r.rel_error <= self.threshold else "NO"
            lines.append(f"{r.name:<28}{r.analytic:>18.10g}{r.numeric:>18.10g}{r.rel_error:>12.2e}  {ok}")
        lines.append(f"{self.target}: max relative error {self.max_error:.2e} "
                     f"(threshold {self.threshold:.0e}) -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def central_difference(fun, x, v, eps):
    return (fun(x + eps * v) - fun(x - eps * v)) / (2.0 * eps)


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_acquisition(rng, n, n_coils, n_images, lines=None, normalize: bool = True):
    """Random coils and line masks (centre line always sampled)."""
    coils = _cplx(rng, (n_coils, n, n)) + 1.5
    if normalize:
        coils = normalize_coils(coils)
    lines = lines or max(1, n // 2)
    masks = np.zeros((n_images, n), dtype=bool)
    for i in range(n_images):
        masks[i, rng.choice(n, lines, replace=False)] = True
        masks[i, n // 2] = True
    return AcquisitionModel(masks, coils)


def random_params(rng, shape):
    return np.stack([0.5 + 0.4 * rng.random(shape), 0.3 * rng.standard_normal(shape),
                     0.4 + 2.5 * rng.random(shape)])


def check_sigmodel(eps=1e-6, seed=0):
    rng = make_rng(seed, 11)
    model = SaturationRecovery([0.5, 1.0, 1.5, 2.0, 8.0])
    p = random_params(rng, (4, 4))
    dy = _cplx(rng, (5, 4, 4))
    dp = rng.standard_normal(p.shape)
    rep = Report("sigmodel", THRESHOLDS["sigmodel"])
    fd = central_difference(lambda x: model.forward(x), p, dp, eps)
    rep.rows.append(CheckRow("jvp", np.vdot(dy, model.jvp(p, dp)).real, np.vdot(dy, fd).real))
    rep.rows.append(CheckRow("vjp", float(np.sum(model.vjp(p, dy) * dp)), np.vdot(dy, fd).real))
    y = model.forward(p) + 0.01 * _cplx(rng, dy.shape)
    v = _cplx(rng, y.shape)
    num = central_difference(lambda z: float(np.sum(model.initial_guess(z) * dp)), y, v, eps)
    rep.rows.append(CheckRow("initial guess vjp", np.vdot(model.initial_guess_vjp(y, dp), v).real, num))
    return rep


def check_prior(eps=1e-6, seed=0):
    rng = make_rng(seed, 12)
    prior = ConvPrior(4, 2, 3, rng=rng)
    prior.w2 = 0.3 * rng.standard_normal(prior.w2.shape)
    prior.b_iter = rng.standard_normal(prior.b_iter.shape)
    x = rng.standard_normal((4, 8, 8))
    dout = rng.standard_normal((2, 8, 8))
    out, cache = prior.forward(x, 2)
    dx, grads = prior.backward(cache, dout)
    rep = Report("prior", THRESHOLDS["prior"])
    for name in prior.PARAMS:
        base = getattr(prior, name).copy()
        v = rng.standard_normal(base.shape)

        def loss(w, name=name):
            setattr(prior, name, w)
            return float(np.sum(prior.forward(x, 2)[0] * dout))

        num = central_difference(loss, base, v, eps)
        setattr(prior, name, base)
        rep.rows.append(CheckRow(name, float(np.sum(grads[name] * v)), num))
    v = rng.standard_normal(x.shape)
    num = central_difference(lambda z: float(np.sum(prior.forward(z, 2)[0] * dout)), x, v, eps)
    rep.rows.append(CheckRow("input", float(np.sum(dx * v)), num))
    return rep


def check_lindc(eps=1e-5, seed=0, n=8, n_coils=2):
    rng = make_rng(seed, 13)
    acq = random_acquisition(rng, n, n_coils, 3, normalize=False)
    cfg = CgConfig(tol=1e-13, max_iter=1000)
    priors = [(_cplx(rng, acq.image_shape), 0.3), (_cplx(rng, acq.image_shape), 0.05)]
    k = acq.forward(_cplx(rng, acq.image_shape)) + 0.1 * acq._kmask * _cplx(rng, acq.data_shape)
    w = _cplx(rng, acq.image_shape)

    def loss(k_=k, acq_=acq, priors_=priors):
        y, _ = lindc_forward(k_, acq_, priors_, cfg)
        return np.vdot(w, y).real

    y_star, _ = lindc_forward(k, acq, priors, cfg)
    g = lindc_backward(k, acq, priors, y_star, w, cfg, want_k=True, want_coils=True)
    rep = Report("lindc", THRESHOLDS["lindc"])
    for j, (yj, lam) in enumerate(priors):
        v = _cplx(rng, yj.shape)

        def f(z, j=j):
            pr = list(priors)
            pr[j] = (z, pr[j][1])
            return loss(priors_=pr)

        rep.rows.append(CheckRow(f"prior image {j + 1}", np.vdot(g.priors[j], v).real,
                                 central_difference(f, yj, v, eps)))

        def flam(t, j=j):
            pr = list(priors)
            pr[j] = (pr[j][0], float(t))
            return loss(priors_=pr)

        rep.rows.append(CheckRow(f"weight {j + 1}", float(g.lams[j]),
                                 central_difference(flam, lam, 1.0, eps)))
    v = acq._kmask * _cplx(rng, k.shape)
    rep.rows.append(CheckRow("k-space", np.vdot(g.k, v).real,
                             central_difference(lambda z: loss(k_=z), k, v, eps)))
    v = _cplx(rng, acq.coils.shape)
    rep.rows.append(CheckRow("coil maps", np.vdot(g.coils, v).real,
                             central_difference(lambda c: loss(acq_=acq.with_coils(c)), acq.coils, v, eps)))
    return rep


def check_nlreg(eps=1e-5, seed=0, n=4):
    rng = make_rng(seed, 14)
    model = SaturationRecovery([0.5, 1.0, 1.5, 2.0, 8.0])
    p_true = random_params(rng, (n, n))
    y = model.forward(p_true) + 0.02 * _cplx(rng, (5, n, n))
    p_reg = p_true + 0.1 * rng.standard_normal(p_true.shape)
    lam = 0.3
    cfg = LbfgsConfig(max_iter=500, gtol=1e-13)
    w = rng.standard_normal(p_true.shape)

    def solve(y_=y, preg_=p_reg, lam_=lam):
        return nlreg_forward(model, y_, preg_, lam_, p_reg, cfg=cfg)

    def loss(**kw):
        return float(np.sum(w * solve(**kw)[0]))

    p_star, info = solve()
    g = nlreg_backward(model, y, p_reg, lam, p_star, w, space="u", bounds=None, u_star=info.u)
    rep = Report("nlreg", THRESHOLDS["nlreg"])
    v = _cplx(rng, y.shape)
    rep.rows.append(CheckRow("image series", np.vdot(g.y, v).real,
                             central_difference(lambda z: loss(y_=z), y, v, eps)))
    v = rng.standard_normal(p_reg.shape)
    rep.rows.append(CheckRow("parameter prior", float(np.sum(g.p_reg * v)),
                             central_difference(lambda z: loss(preg_=z), p_reg, v, eps)))
    rep.rows.append(CheckRow("weight", float(g.lam),
                             central_difference(lambda t: loss(lam_=float(t)), lam, 1.0, eps)))
    return rep


def check_endtoend(eps=1e-5, seed=0, n=12, n_iter=2, n_entries=12, cfg: PinqiConfig | None = None):
    """Loss gradient of the unrolled network against every weight and sampled prior entries."""
    rng = make_rng(seed, 15)
    model = SaturationRecovery([0.3, 1.0, 3.0])
    acq = random_acquisition(rng, n, 2, 3)
    p_true = random_params(rng, (n, n))
    k = acq.forward(model.forward(p_true))
    k = k + 0.01 * acq._kmask * _cplx(rng, k.shape)
    cfg = cfg or PinqiConfig(n_iter=n_iter, cg=CgConfig(tol=1e-12, max_iter=1000),
                             lbfgs=LbfgsConfig(max_iter=400, gtol=1e-12))
    state = init_state(cfg, 3, seed)
    for prior in state.priors.values():
        prior.w2 = 0.05 * rng.standard_normal(prior.w2.shape)
    weight = np.ones((n, n))
    y_true = model.forward(p_true)

    def loss(st):
        tr = pinqi_reconstruct(k, acq, model, st, cfg)
        return pinqi_loss(tr, p_true, weight, cfg, y_true=y_true)[0]

    trace = pinqi_reconstruct(k, acq, model, state, cfg)
    _, cot = pinqi_loss(trace, p_true, weight, cfg, y_true=y_true)
    grad = state.flatten_grads(pinqi_backward(trace, cot, k, acq, model, state, cfg))
    theta = state.flatten()
    names = []
    for key, arr in state._slots():
        names += ["/".join(key)] * arr.size
    n_lam = state.lambdas.size + (state.steps.size if cfg.gd_steps else 0)
    pick = list(range(n_lam))
    pool = np.arange(state.lambdas.size + state.steps.size, theta.size)
    if pool.size:
        pick += list(rng.choice(pool, min(n_entries, pool.size), replace=False))
    rep = Report("endtoend", THRESHOLDS["endtoend"])
    probe = state.copy()

    def at(x):
        probe.unflatten(x)
        return loss(probe)

    for j in pick:
        e = np.zeros_like(theta)
        e[j] = 1.0
        rep.rows.append(CheckRow(f"{names[j]}[{j}]", float(grad[j]), central_difference(at, theta, e, eps)))
    return rep


def run(target, eps=None, seed=0):
    checks = {"sigmodel": check_sigmodel, "prior": check_prior, "lindc": check_lindc,
              "nlreg": check_nlreg, "endtoend": check_endtoend}
    if target not in checks:
        raise ValueError(f"unknown gradcheck target {target!r}")
    kwargs = {"seed": seed}
    if eps is not None:
        kwargs["eps"] = eps
    return checks[target](**kwargs)
