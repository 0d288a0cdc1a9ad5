"""Training: Adam with decoupled weight decay, warmup plus cosine schedule, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SolverError, make_rng, read_tensor, write_tensor
from .pinqi import PinqiConfig, init_state, pinqi_backward, pinqi_loss, pinqi_reconstruct
from .regnet import LAMBDA_ROWS, ModelState, lambda_effective
from .synth import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 250
    batch: int = 4
    lr_prior: float = 4e-3
    lr_lambda: float = 2e-2
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    val_every: int = 50
    val_samples: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr_prior < 0 or self.lr_lambda < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("weight decay must be >= 0 and the clip norm > 0")


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(theta, grad, moments: AdamMoments, lr, step: int, cfg: TrainConfig, decay_mask=None):
    """One Adam update with decoupled weight decay on the ``decay_mask`` entries.

    ``lr`` may be a scalar or a per-entry array; ``step`` counts from 1. Returns
    the new parameter vector; ``moments`` is updated in place.
    """
    if step < 1:
        raise ValueError("Adam steps count from 1")
    moments.m = cfg.beta1 * moments.m + (1 - cfg.beta1) * grad
    moments.v = cfg.beta2 * moments.v + (1 - cfg.beta2) * grad * grad
    mhat = moments.m / (1 - cfg.beta1 ** step)
    vhat = moments.v / (1 - cfg.beta2 ** step)
    new = theta - lr * mhat / (np.sqrt(vhat) + cfg.eps)
    if cfg.weight_decay and decay_mask is not None:
        new = new - np.where(decay_mask, lr * cfg.weight_decay, 0.0) * theta
    return new


def lr_schedule(step, total, warmup_frac: float = 0.1):
    """Multiplier of the peak rate: linear ramp from 0, then cosine decay to 0 at ``total``."""
    if total <= 0:
        return 0.0
    step = min(max(step, 0), total)
    warm = int(round(warmup_frac * total))
    if warm and step < warm:
        return step / warm
    if total == warm:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * (step - warm) / (total - warm)))


def batch_indices(n, step, batch, seed):
    """Sample indices for a 1-based ``step``; epoch permutations depend only on ``seed``."""
    per_epoch = max(1, n // batch) if n >= batch else 1
    epoch, pos = divmod(step - 1, per_epoch)
    perm = make_rng(seed, 7, epoch).permutation(n)
    if n < batch:
        return np.resize(perm, batch)
    return perm[pos * batch:(pos + 1) * batch]


def sample_loss_grad(rec, state, pcfg: PinqiConfig, want_grad: bool = True):
    """Loss (and flattened gradient) of one dataset sample."""
    acq, model = rec.acquisition(), rec.model()
    trace = pinqi_reconstruct(rec.k, acq, model, state, pcfg)
    loss, cot = pinqi_loss(trace, rec.p_true, rec.weight_mask, pcfg, y_true=rec.y_true)
    if not want_grad:
        return loss, None, trace
    grads = pinqi_backward(trace, cot, rec.k, acq, model, state, pcfg)
    return loss, state.flatten_grads(grads), trace


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    val_rows: list = field(default_factory=list)

    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        for r in rows:
            r["step"] = int(r["step"])
        return cls(rows)


def _lambda_columns(state):
    lam = lambda_effective(state.lambdas)
    return {f"lam_{row}_{i + 1}": float(lam[r, i]) for r, row in enumerate(LAMBDA_ROWS)
            for i in range(lam.shape[1])}


def save_checkpoint(path, state, moments, step, tcfg, pcfg, log_: TrainLog):
    path = Path(path)
    extra = {"step": step, "train_config": asdict(tcfg), "pinqi_config": pcfg.to_dict()}
    state.save(path, extra)
    write_tensor(moments.m, path / "adam_m.qten")
    write_tensor(moments.v, path / "adam_v.qten")
    log_.to_csv(path / "train_log.csv")


def load_checkpoint(path):
    """Returns ``(state, moments, step, pinqi_config, manifest)``."""
    path = Path(path)
    state, manifest = ModelState.load(path)
    n = state.flatten().size
    if (path / "adam_m.qten").is_file():
        moments = AdamMoments(read_tensor(path / "adam_m.qten"), read_tensor(path / "adam_v.qten"))
    else:
        moments = AdamMoments.zeros(n)
    pcfg = PinqiConfig.from_dict(manifest["pinqi_config"]) if "pinqi_config" in manifest else None
    return state, moments, int(manifest.get("step", 0)), pcfg, manifest


def evaluate_loss(data, indices, state, pcfg):
    return float(np.mean([sample_loss_grad(data[i], state, pcfg, want_grad=False)[0] for i in indices]))


def train_loop(data, tcfg: TrainConfig, pcfg: PinqiConfig, out=None, val_data=None,
               resume=None, state: ModelState | None = None, jobs: int = 1,
               stop_after: int | None = None):
    """Train on a dataset directory (or :class:`Dataset`).

    Writes ``last/`` and ``best/`` checkpoints and ``train_log.csv`` under
    ``out`` when given. ``resume`` continues from a checkpoint directory written
    by this function; the continued loss trace equals the uninterrupted one.
    ``stop_after`` ends the run early (with a checkpoint) without changing the
    schedule, which is always laid out over ``tcfg.steps``. Returns ``(state, log)``.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    data.check_consistent()
    n_images = data[0].taus.size
    train_idx = np.arange(len(data))
    val_idx = np.array([], dtype=int)
    if tcfg.val_samples:
        if tcfg.val_samples >= len(data):
            raise ValueError("validation split leaves no training samples")
        train_idx, val_idx = train_idx[:-tcfg.val_samples], train_idx[-tcfg.val_samples:]
    if val_data is not None:
        val_data = val_data if isinstance(val_data, Dataset) else Dataset(val_data)
    vset = val_data if val_data is not None else data
    vidx = np.arange(len(val_data)) if val_data is not None else val_idx

    tlog = TrainLog()
    start = 0
    if resume is not None:
        state, moments, start, _, _ = load_checkpoint(resume)
        prev = Path(resume) / "train_log.csv"
        if prev.is_file():
            tlog = TrainLog.from_csv(prev)
            tlog.rows = [r for r in tlog.rows if r["step"] <= start]
    else:
        state = state.copy() if state is not None else init_state(pcfg, n_images, tcfg.seed)
        moments = AdamMoments.zeros(state.flatten().size)
    decay = state.decay_mask()
    best = np.inf
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"train": asdict(tcfg), "pinqi": pcfg.to_dict()}, indent=2, sort_keys=True))

    pool = None
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(jobs)

    last = tcfg.steps if stop_after is None else min(stop_after, tcfg.steps)
    for step in range(start + 1, last + 1):
        t0 = time.perf_counter()
        idx = train_idx[batch_indices(train_idx.size, step, tcfg.batch, tcfg.seed)]
        skipped = 0
        try:
            run = (lambda i: sample_loss_grad(data[i], state, pcfg))
            results = list(pool.map(run, idx)) if pool else [run(i) for i in idx]
            loss = float(np.mean([r[0] for r in results]))
            grad = np.mean([r[1] for r in results], axis=0)
        except SolverError as exc:
            log.warning("step %d: solver failure (%s), step skipped", step, exc)
            loss, grad, skipped = float("nan"), None, 1
        gnorm = float(np.linalg.norm(grad)) if grad is not None else float("nan")
        if grad is not None and not np.all(np.isfinite(grad)):
            log.warning("step %d: non-finite gradient, step skipped", step)
            skipped = 1
        scale = lr_schedule(step, tcfg.steps, tcfg.warmup_frac)
        if not skipped:
            if gnorm > tcfg.clip_norm:
                grad = grad * (tcfg.clip_norm / gnorm)
            lr = np.where(decay, tcfg.lr_prior, tcfg.lr_lambda) * scale
            state.unflatten(adam_step(state.flatten(), grad, moments, lr, step, tcfg, decay))
            if not np.all(lambda_effective(state.lambdas) > 0):
                raise SolverError("effective weights left the positive range", iteration=step)
        row = {"step": step, "loss": loss, "grad_norm": gnorm, "lr_scale": scale,
               "skipped": skipped, "seconds": time.perf_counter() - t0, **_lambda_columns(state)}
        tlog.rows.append(row)
        log.info("step %d loss %.6g |g| %.3g", step, loss, gnorm)

        at_end = step == last
        if out is not None and (at_end or (tcfg.val_every and step % tcfg.val_every == 0)):
            if vidx.size:
                metric = evaluate_loss(vset, vidx, state, pcfg)
                tlog.val_rows.append({"step": step, "val_loss": metric})
            else:
                window = [r["loss"] for r in tlog.rows[-max(tcfg.val_every, 1):] if np.isfinite(r["loss"])]
                metric = float(np.mean(window)) if window else np.inf
            if metric < best:
                best = metric
                save_checkpoint(out / "best", state, moments, step, tcfg, pcfg, tlog)
            save_checkpoint(out / "last", state, moments, step, tcfg, pcfg, tlog)
            tlog.to_csv(out / "train_log.csv")
    if pool:
        pool.shutdown()
    return state, tlog
