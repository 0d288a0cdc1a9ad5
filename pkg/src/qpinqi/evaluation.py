"""Mask-restricted T1 metrics, ROI statistics and baseline reconstructions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import t1_from_r1
from .lindc import CgConfig, lindc_forward
from .nlreg import LbfgsConfig, nlreg_forward
from .sigmodel import R1, Bounds


def _mask(mask, shape):
    m = np.asarray(mask) > 0
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match maps {shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


def nrmse(pred, true, mask):
    """``||pred - true||_2 / ||true||_2`` over the masked pixels."""
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    m = _mask(mask, true.shape)
    ref = np.linalg.norm(true[m])
    if ref == 0:
        raise ValueError("reference is zero under the mask")
    return float(np.linalg.norm(pred[m] - true[m]) / ref)


def mae(pred, true, mask):
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    m = _mask(mask, true.shape)
    return float(np.mean(np.abs(pred[m] - true[m])))


def ssim_valid_centers(mask, window: int = 7):
    """Pixels whose ``window x window`` neighbourhood lies inside the mask and image."""
    m = np.asarray(mask) > 0
    # border_value=0 also drops centres closer than window // 2 to the image edge
    return ndimage.binary_erosion(m, structure=np.ones((window, window)), border_value=0)


def ssim(pred, true, mask, window: int = 7, data_range=None, k1: float = 0.01, k2: float = 0.03):
    """Mean SSIM over uniform windows lying fully inside ``mask``.

    Local statistics are population moments over each window. ``data_range``
    defaults to ``max - min`` of ``true`` under the mask.
    """
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    m = _mask(mask, true.shape)
    centres = ssim_valid_centers(m, window)
    if not centres.any():
        raise ValueError(f"no {window}x{window} window lies fully inside the mask")
    if data_range is None:
        data_range = float(true[m].max() - true[m].min())
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def local_mean(img):
        return ndimage.uniform_filter(img, size=window, mode="constant")

    mx, my = local_mean(pred), local_mean(true)
    vx = local_mean(pred * pred) - mx * mx
    vy = local_mean(true * true) - my * my
    cxy = local_mean(pred * true) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(np.mean(s[centres]))


def t1_map(p, floor: float = 1e-6):
    return t1_from_r1(np.asarray(p)[R1], floor)


@dataclass
class Scores:
    nrmse: float
    mae: float
    ssim: float


def score_t1(p_pred, p_true, mask) -> Scores:
    """T1 scores; SSIM is NaN when no full window fits inside the mask (small ROIs)."""
    pred, true = t1_map(p_pred), t1_map(p_true)
    s = ssim(pred, true, mask) if ssim_valid_centers(mask).any() else float("nan")
    return Scores(nrmse(pred, true, mask), mae(pred, true, mask), s)


def roi_stats(t1, labels):
    """``(label, mean, std, n)`` for every positive label."""
    t1 = np.asarray(t1, dtype=float)
    out = []
    for lab in np.unique(labels):
        if lab <= 0:
            continue
        vals = t1[labels == lab]
        out.append((int(lab), float(vals.mean()), float(vals.std()), int(vals.size)))
    return out


# baselines

def pixelwise_regression(model, y, bounds: Bounds | None = None, cfg: LbfgsConfig | None = None):
    """Unregularized bounded fit of every pixel, started at the soft grid estimate.

    Returns ``(p, flagged)``; ``flagged`` marks pixels without signal or where the
    solver did not reach a stationary point.
    """
    cfg = cfg or LbfgsConfig(max_iter=200)
    p0 = model.initial_guess(y)
    p, info = nlreg_forward(model, y, None, 0.0, p0, bounds, cfg)
    empty = np.sum(np.abs(y) ** 2, axis=0) == 0
    return p, empty | ~info.stationary


def baselines(k, acq, model, which=("zerofill", "cgsense"), cgsense_lam: float = 1e-2,
              cg: CgConfig | None = None, lbfgs: LbfgsConfig | None = None, bounds=None):
    """Two-step reference reconstructions: image reconstruction then regression.

    ``"zerofill"`` fits the adjoint ``A^H k``; ``"cgsense"`` fits the
    Tikhonov-regularized least-squares images (weight ``cgsense_lam``).
    Returns ``{name: (p, flagged)}``.
    """
    out = {}
    for name in which:
        if name == "zerofill":
            y = acq.adjoint(k)
        elif name == "cgsense":
            zero = np.zeros(acq.image_shape, dtype=complex)
            y, _ = lindc_forward(k, acq, [(zero, cgsense_lam)], cg or CgConfig(tol=1e-8, max_iter=300))
        else:
            raise ValueError(f"unknown baseline {name!r}")
        out[name] = pixelwise_regression(model, y, bounds, lbfgs)
    return out


def write_metrics_csv(rows, path):
    """``rows`` of ``(id, accel, Scores)``; appends an aggregate ``mean`` row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "accel", "nrmse_t1", "mae_t1", "ssim_t1"])
        for sid, accel, sc in rows:
            w.writerow([sid, accel, f"{sc.nrmse:.10g}", f"{sc.mae:.10g}", f"{sc.ssim:.10g}"])
        if rows:
            arr = np.array([[sc.nrmse, sc.mae, sc.ssim] for _, _, sc in rows])
            mean = arr.mean(axis=0)
            w.writerow(["mean", "", *(f"{v:.10g}" for v in mean)])


def write_roi_csv(stats, reference, path):
    """Table with one row per ROI: reference T1, mean, std and relative difference."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["roi", "reference_t1", "mean_t1", "std_t1", "difference", "n_pixels"])
        for (lab, mean, std, n), ref in zip(stats, reference):
            w.writerow([lab, ref, f"{mean:.6g}", f"{std:.6g}", f"{(mean - ref) / ref:.6g}", n])
