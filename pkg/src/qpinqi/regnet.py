"""Learnable regularization: positive weights and small convolutional priors.

Regularization weights are stored unconstrained and mapped through
``lam = softplus(5 t) / 5``. The priors are two-layer 3x3 convolutional networks
with a residual connection and per-iteration bias, written out with explicit
backward passes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import make_rng, read_tensor, write_tensor

SHARPNESS = 5.0
LAMBDA_ROWS = ("p", "y", "q")


def lambda_effective(t):
    """``log(1 + exp(5 t)) / 5``, overflow-safe."""
    return np.logaddexp(0.0, SHARPNESS * np.asarray(t, dtype=float)) / SHARPNESS


def lambda_effective_grad(t):
    return expit(SHARPNESS * np.asarray(t, dtype=float))


def lambda_init_invert(lam):
    """Unconstrained value ``t`` with ``lambda_effective(t) == lam``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("regularization weights must be positive")
    x = SHARPNESS * lam
    # log(expm1(x)) without overflow for large x
    return np.where(x > 30, x + np.log1p(-np.exp(-np.minimum(x, 700))),
                    np.log(np.expm1(np.minimum(x, 30)))) / SHARPNESS


def _softplus(x):
    return np.logaddexp(0.0, x)


def _im2col(x):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, di:di + h, dj:dj + w]
    return cols.reshape(c * 9, h * w)


def _col2im(cols, shape):
    c, h, w = shape
    cols = cols.reshape(c, 9, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, di:di + h, dj:dj + w] += cols[:, di * 3 + dj]
    return xp[:, 1:-1, 1:-1]


class ConvPrior:
    """Residual two-layer convolutional network ``x[:out] + conv2(act(conv1(x) + b_it))``.

    The first ``out_channels`` input channels carry the residual. The second
    layer starts at zero, so a fresh network returns its residual input exactly.
    Weights are shared across iterations; the iteration enters only through a
    learned bias added after the first layer.
    """

    PARAMS = ("w1", "b1", "b_iter", "w2", "b2")

    def __init__(self, in_channels, out_channels, n_iter, hidden=8, rng=None):
        if out_channels > in_channels:
            raise ValueError("residual needs out_channels <= in_channels")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.n_iter = n_iter
        self.hidden = hidden
        rng = rng if rng is not None else make_rng(0)
        fan_in = in_channels * 9
        self.w1 = rng.standard_normal((hidden, in_channels, 3, 3)) * np.sqrt(1.0 / fan_in)
        self.b1 = np.zeros(hidden)
        self.b_iter = np.zeros((n_iter, hidden))
        self.w2 = np.zeros((out_channels, hidden, 3, 3))
        self.b2 = np.zeros(out_channels)

    def params(self):
        return {name: getattr(self, name) for name in self.PARAMS}

    def zeros_like(self):
        return {name: np.zeros_like(v) for name, v in self.params().items()}

    def forward(self, x, iteration):
        """Apply the network; ``iteration`` counts from 1. Returns ``(out, cache)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(f"expected ({self.in_channels}, H, W) input, got {x.shape}")
        if not 1 <= iteration <= self.n_iter:
            raise ValueError(f"iteration {iteration} outside 1..{self.n_iter}")
        _, h, w = x.shape
        cols1 = _im2col(x)
        bias = self.b1 + self.b_iter[iteration - 1]
        z = self.w1.reshape(self.hidden, -1) @ cols1 + bias[:, None]
        a = _softplus(z)
        cols2 = _im2col(a.reshape(self.hidden, h, w))
        out = self.w2.reshape(self.out_channels, -1) @ cols2 + self.b2[:, None]
        out = x[: self.out_channels] + out.reshape(self.out_channels, h, w)
        return out, (x.shape, iteration, cols1, z, cols2)

    def jvp(self, x, iteration, dx):
        """Directional derivative of :meth:`forward` along the input direction ``dx``."""
        _, (shape, _, _, z, _) = self.forward(x, iteration)
        _, h, w = shape
        dz = self.w1.reshape(self.hidden, -1) @ _im2col(np.asarray(dx, dtype=float))
        da = (expit(z) * dz).reshape(self.hidden, h, w)
        dout = (self.w2.reshape(self.out_channels, -1) @ _im2col(da)).reshape(self.out_channels, h, w)
        return np.asarray(dx, dtype=float)[: self.out_channels] + dout

    def backward(self, cache, dout):
        """Return ``(dx, grads)`` for the output cotangent ``dout``."""
        shape, iteration, cols1, z, cols2 = cache
        c, h, w = shape
        d2 = np.asarray(dout, dtype=float).reshape(self.out_channels, -1)
        grads = {
            "w2": (d2 @ cols2.T).reshape(self.w2.shape),
            "b2": d2.sum(axis=1),
        }
        da = _col2im(self.w2.reshape(self.out_channels, -1).T @ d2, (self.hidden, h, w))
        dz = da.reshape(self.hidden, -1) * expit(z)
        grads["w1"] = (dz @ cols1.T).reshape(self.w1.shape)
        grads["b1"] = dz.sum(axis=1)
        b_iter = np.zeros_like(self.b_iter)
        b_iter[iteration - 1] = grads["b1"]
        grads["b_iter"] = b_iter
        dx = _col2im(self.w1.reshape(self.hidden, -1).T @ dz, shape)
        dx[: self.out_channels] += np.asarray(dout, dtype=float)
        return dx, grads


class ModelState:
    """Everything training updates: unconstrained weights and prior networks.

    Attributes
    ----------
    lambdas : ndarray, shape (3, n_iter)
        Unconstrained weights, rows ``p``, ``y``, ``q``.
    steps : ndarray, shape (n_iter,)
        Unconstrained step sizes of the gradient-descent comparison mode.
    priors : dict
        ``"y"`` and/or ``"p"`` :class:`ConvPrior` networks.
    """

    def __init__(self, lambdas, steps, priors):
        self.lambdas = np.asarray(lambdas, dtype=float)
        self.steps = np.asarray(steps, dtype=float)
        self.priors = dict(priors)

    @property
    def n_iter(self):
        return self.lambdas.shape[1]

    def effective(self):
        return lambda_effective(self.lambdas)

    # flat view, fixed order: lambdas, steps, then each prior's parameters

    def _slots(self):
        yield ("lambdas",), self.lambdas
        yield ("steps",), self.steps
        for role in sorted(self.priors):
            for name, arr in self.priors[role].params().items():
                yield (role, name), arr

    def keys(self):
        return [key for key, _ in self._slots()]

    def flatten(self):
        return np.concatenate([arr.ravel() for _, arr in self._slots()])

    def decay_mask(self):
        """True for entries that take weight decay (prior weights, not lambdas/steps)."""
        return np.concatenate([np.full(arr.size, len(key) == 2) for key, arr in self._slots()])

    def lambda_mask(self):
        return ~self.decay_mask()

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for key, arr in list(self._slots()):
            n = arr.size
            new = vec[pos:pos + n].reshape(arr.shape).copy()
            pos += n
            if key == ("lambdas",):
                self.lambdas = new
            elif key == ("steps",):
                self.steps = new
            else:
                setattr(self.priors[key[0]], key[1], new)
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, state needs {pos}")

    def flatten_grads(self, grads):
        """Flatten a gradient dict keyed like :meth:`keys`; missing entries are zero."""
        parts = []
        for key, arr in self._slots():
            g = grads.get(key)
            parts.append(np.zeros(arr.size) if g is None else np.asarray(g, dtype=float).ravel())
        return np.concatenate(parts)

    def copy(self):
        new = ModelState(self.lambdas.copy(), self.steps.copy(), {})
        for role, prior in self.priors.items():
            clone = ConvPrior.__new__(ConvPrior)
            clone.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                                   for k, v in prior.__dict__.items()})
            new.priors[role] = clone
        return new

    def digest(self):
        return hashlib.sha256(self.flatten().tobytes()).hexdigest()[:16]

    def save(self, path, extra=None):
        """Write a checkpoint directory: QTEN1 tensors plus ``manifest.json``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        files = {}
        for key, arr in self._slots():
            name = "_".join(key) + ".qten"
            write_tensor(arr, path / name)
            files["/".join(key)] = name
        manifest = {
            "format": "qpinqi-checkpoint-1",
            "lambdas_raw": {row: self.lambdas[i].tolist() for i, row in enumerate(LAMBDA_ROWS)},
            "lambdas": {row: lambda_effective(self.lambdas[i]).tolist() for i, row in enumerate(LAMBDA_ROWS)},
            "priors": {role: {"in_channels": p.in_channels, "out_channels": p.out_channels,
                              "n_iter": p.n_iter, "hidden": p.hidden}
                       for role, p in self.priors.items()},
            "files": files,
            "digest": self.digest(),
        }
        if extra:
            manifest.update(extra)
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        files = manifest["files"]
        priors = {}
        for role, spec in manifest["priors"].items():
            prior = ConvPrior(spec["in_channels"], spec["out_channels"], spec["n_iter"], spec["hidden"])
            for name in ConvPrior.PARAMS:
                setattr(prior, name, read_tensor(path / files[f"{role}/{name}"]))
            priors[role] = prior
        state = cls(read_tensor(path / files["lambdas"]), read_tensor(path / files["steps"]), priors)
        return state, manifest
