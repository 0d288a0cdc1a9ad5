"""Synthetic training data: phantoms, coil maps, line masks and noisy k-space.

Phantoms are built from randomly nested ellipses, one tissue class per
ellipse, with class-wise T1 and |M0| drawn from plausible ranges and smooth
polynomial perturbations on top. A tube mode lays out nine disks with fixed
reference T1 values for ROI validation.

Datasets are directories holding ``manifest.json`` and one subdirectory of
QTEN1 tensors per sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import make_rng, read_tensor, write_tensor
from .encoding import AcquisitionModel, normalize_coils
from .sigmodel import SaturationRecovery

log = logging.getLogger(__name__)

# class-wise T1 (s) and |M0| ranges; the first entry is the outer "head" class
DEFAULT_T1_RANGES = (
    (0.30, 0.45), (0.55, 0.75), (0.80, 1.05), (1.10, 1.40), (1.20, 1.60), (1.50, 1.90),
    (1.80, 2.30), (2.20, 2.80), (2.70, 3.40), (3.30, 4.00), (3.80, 4.50),
)
DEFAULT_M0_RANGES = (
    (0.55, 0.75), (0.60, 0.80), (0.65, 0.85), (0.70, 0.90), (0.70, 0.95), (0.75, 0.95),
    (0.80, 1.00), (0.80, 1.00), (0.85, 1.00), (0.90, 1.00), (0.90, 1.00),
)
TUBE_T1 = (0.28, 0.38, 0.39, 0.45, 0.59, 0.60, 1.15, 1.42, 1.76)
DEFAULT_TAUS = (0.5, 1.0, 1.5, 2.0, 8.0)
# central line count per acceleration on a 192-line grid, scaled with Ny
ACS_LINES = {4: 12, 6: 10, 8: 8}


@dataclass
class PhantomSpec:
    size: int = 64
    n_classes: int = 11
    t1_ranges: tuple = DEFAULT_T1_RANGES
    m0_ranges: tuple = DEFAULT_M0_RANGES
    mode: str = "brainlike"
    # augmentation
    poly_degree: int = 3
    t1_poly_amp: float = 0.1
    phase_amp: float = np.pi
    bias_amp: float = 0.3
    flips: bool = True
    max_rotation_deg: float = 10.0

    def __post_init__(self):
        if self.mode not in ("brainlike", "tubes"):
            raise ValueError(f"unknown phantom mode {self.mode!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two tissue classes")
        if len(self.t1_ranges) < self.n_classes or len(self.m0_ranges) < self.n_classes:
            raise ValueError("one T1 and |M0| range per class is required")
        for lo, hi in self.t1_ranges[: self.n_classes]:
            if not 0 < lo <= hi:
                raise ValueError("T1 ranges must be positive")
        if not 0 <= self.t1_poly_amp < 1:
            raise ValueError("T1 multiplier amplitude must lie in [0, 1)")
        if not 0 <= self.bias_amp < 1:
            raise ValueError("bias amplitude must lie in [0, 1)")
        if self.size < (8 if self.mode == "tubes" else 16):
            raise ValueError("grid too small for the phantom layout (tubes >= 8, brainlike >= 16)")


@dataclass
class SimSpec:
    n_coils: int = 4
    halfwidth_range: tuple = (0.2, 0.5)
    accel: int = 4
    acs_lines: int | None = None
    taus: tuple = DEFAULT_TAUS
    sigma_range: tuple = (0.001, 0.04)
    normalize_coils: bool = True

    def __post_init__(self):
        if self.n_coils < 1:
            raise ValueError("need at least one coil")
        if self.accel < 1:
            raise ValueError("acceleration must be a positive integer")
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi:
            raise ValueError("noise range must satisfy 0 <= lo <= hi")
        SaturationRecovery(self.taus)

    def acs_for(self, ny):
        if self.acs_lines is not None:
            return self.acs_lines
        base = ACS_LINES.get(self.accel, 8)
        return max(2, int(round(base * ny / 192)))


# smooth random fields

def _grid(size):
    ax = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(ax, ax, indexing="ij")


def random_polynomial(size, degree, rng):
    """Random 2D polynomial of total degree ``degree``, scaled to max |value| 1."""
    x, y = _grid(size)
    out = np.zeros((size, size))
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            out += rng.standard_normal() * x ** i * y ** j
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _ellipse(size, cx, cy, ax, ay, angle):
    x, y = _grid(size)
    c, s = np.cos(angle), np.sin(angle)
    xr = (x - cx) * c + (y - cy) * s
    yr = -(x - cx) * s + (y - cy) * c
    return (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0


def _brain_labels(spec, rng, max_tries=20):
    """Label map: 0 background, 1..n_classes tissue; every class present."""
    n = spec.size
    # keep small ellipses at least a few pixels wide on coarse grids
    small = (max(0.06, 2.5 / n), max(0.22, 4.0 / n))
    min_count = max(1, min(4, round(4 * (n / 64) ** 2)))
    for _ in range(max_tries):
        labels = np.zeros((n, n), dtype=int)
        head = _ellipse(n, 0, 0, rng.uniform(0.75, 0.9), rng.uniform(0.65, 0.85), rng.uniform(-0.3, 0.3))
        labels[head] = 1
        # larger ellipses of random classes first, then every class once on top
        extra = rng.integers(2, spec.n_classes + 1, spec.n_classes)
        required = rng.permutation(np.arange(2, spec.n_classes + 1))
        for cls, size in [(c, (0.15, 0.4)) for c in extra] + [(c, small) for c in required]:
            r = rng.uniform(0.0, 0.5)
            phi = rng.uniform(0, 2 * np.pi)
            e = _ellipse(n, r * np.cos(phi), r * np.sin(phi), rng.uniform(*size),
                         rng.uniform(*size), rng.uniform(0, np.pi))
            labels[e & head] = cls
        counts = np.bincount(labels.ravel(), minlength=spec.n_classes + 1)
        if np.all(counts[1:] >= min_count):
            return labels
    raise RuntimeError(f"could not place all tissue classes in {max_tries} attempts")


def tube_labels(size):
    """Label map of nine disks on a 3x3 layout (labels 1..9, 0 elsewhere)."""
    labels = np.zeros((size, size), dtype=int)
    centers = np.linspace(-0.55, 0.55, 3)
    for a, cx in enumerate(centers):
        for b, cy in enumerate(centers):
            labels[_ellipse(size, cx, cy, 0.2, 0.2, 0.0)] = 3 * a + b + 1
    return labels


def _augment_labels(labels, spec, rng):
    if spec.flips:
        if rng.random() < 0.5:
            labels = labels[::-1]
        if rng.random() < 0.5:
            labels = labels[:, ::-1]
    if spec.max_rotation_deg > 0:
        angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
        labels = ndimage.rotate(labels, angle, reshape=False, order=0, mode="constant", cval=0)
    return np.ascontiguousarray(labels)


def gen_phantom(spec: PhantomSpec, rng):
    """Draw ground-truth parameter maps ``(Re M0, Im M0, R1)`` and the tissue mask.

    Returns ``(p_true, weight_mask, labels)``; ``labels`` numbers the tissue
    classes (or tubes) and is 0 on the background.
    """
    n = spec.size
    if spec.mode == "tubes":
        labels = tube_labels(n)
        t1_vals = np.array(TUBE_T1)
        m0_vals = np.full(9, 0.9)
    else:
        labels = _augment_labels(_brain_labels(spec, rng), spec, rng)
        k = spec.n_classes
        t1_vals = np.array([rng.uniform(*spec.t1_ranges[c]) for c in range(k)])
        m0_vals = np.array([rng.uniform(*spec.m0_ranges[c]) for c in range(k)])
    tissue = labels > 0
    t1 = np.ones((n, n))
    mag = np.zeros((n, n))
    t1[tissue] = t1_vals[labels[tissue] - 1]
    mag[tissue] = m0_vals[labels[tissue] - 1]
    phase = np.zeros((n, n))
    if spec.mode != "tubes":
        amp = rng.uniform(0, spec.t1_poly_amp)
        t1 = t1 * (1.0 + amp * random_polynomial(n, spec.poly_degree, rng))
        bias = 1.0 - spec.bias_amp * rng.random() * 0.5 * (1 + random_polynomial(n, spec.poly_degree, rng))
        mag = mag * bias
        phase = rng.uniform(0, spec.phase_amp) * random_polynomial(n, spec.poly_degree, rng)
    peak = mag.max()
    if peak > 1.0:
        mag = mag / peak
    m0 = mag * np.exp(1j * phase)
    r1 = np.where(tissue, 1.0 / t1, 0.0)
    p = np.stack([m0.real, m0.imag, r1])
    return p, tissue.astype(float), labels


def gen_coils(n_coils, size, rng, halfwidth_range=(0.2, 0.5), normalize: bool = True,
              return_halfwidths: bool = False):
    """Gaussian-amplitude coil maps with random half-width and smooth random phase.

    Coil centres sit evenly on a circle around the field of view (random
    rotation and radius); the half-width at half maximum is drawn from
    ``halfwidth_range`` times the field of view. With ``return_halfwidths`` the
    drawn half-widths (fractions of the field of view) are returned as well.
    """
    x, y = _grid(size)
    offset = rng.uniform(0, 2 * np.pi)
    coils = np.empty((n_coils, size, size), dtype=complex)
    lo, hi = halfwidth_range
    widths = np.empty(n_coils)
    for c in range(n_coils):
        if n_coils == 1:
            cx = cy = 0.0
        else:
            phi = offset + 2 * np.pi * c / n_coils
            radius = rng.uniform(0.8, 1.2)
            cx, cy = radius * np.cos(phi), radius * np.sin(phi)
        widths[c] = rng.uniform(lo, hi)
        hw = widths[c] * 2.0  # grid spans 2 units
        amp = np.exp(-np.log(2.0) * ((x - cx) ** 2 + (y - cy) ** 2) / hw ** 2)
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(0, np.pi / 2) * random_polynomial(size, 2, rng)
        coils[c] = amp * np.exp(1j * phase)
    if normalize:
        coils = normalize_coils(coils)
    return (coils, widths) if return_halfwidths else coils


def gen_masks(ny, n_acq, accel, acs_lines, rng):
    """Per-acquisition variable-density line masks of shape ``(n_acq, ny)``.

    Each mask keeps ``ny // accel`` lines: a centred block of ``acs_lines`` plus
    lines drawn without replacement with Gaussian weights (std ``ny / 4``)
    around the centre.
    """
    if accel == 1:
        return np.ones((n_acq, ny), dtype=bool)
    budget = ny // accel
    if acs_lines > budget or budget < 1 or acs_lines < 0:
        raise ValueError(f"cannot fit {acs_lines} central lines into {budget} lines")
    centre = ny // 2
    acs = np.arange(centre - acs_lines // 2, centre - acs_lines // 2 + acs_lines)
    others = np.setdiff1d(np.arange(ny), acs)
    weight = np.exp(-0.5 * ((others - centre) / (ny / 4)) ** 2)
    weight /= weight.sum()
    masks = np.zeros((n_acq, ny), dtype=bool)
    for i in range(n_acq):
        masks[i, acs] = True
        extra = budget - acs_lines
        if extra:
            masks[i, rng.choice(others, extra, replace=False, p=weight)] = True
    return masks


def simulate_kspace(p_true, coils, masks, taus, sigma, rng):
    """Noisy undersampled multi-coil data and the noiseless image series.

    Noise is ``sigma * (a + i b) / sqrt(2)`` with standard normal ``a, b`` on sampled
    points only, so its complex standard deviation is ``sigma``.
    """
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    model = SaturationRecovery(taus)
    acq = AcquisitionModel(masks, coils)
    y_true = model.forward(p_true)
    k = acq.forward(y_true)
    if sigma > 0:
        shape = k.shape
        noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / np.sqrt(2))
        k = k + noise * acq._kmask
    return k, y_true


@dataclass
class SampleRecord:
    k: np.ndarray
    masks: np.ndarray
    coils: np.ndarray
    p_true: np.ndarray
    weight_mask: np.ndarray
    taus: np.ndarray
    y_true: np.ndarray
    labels: np.ndarray
    sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def acquisition(self):
        return AcquisitionModel(self.masks, self.coils)

    def model(self):
        return SaturationRecovery(self.taus)


def make_sample(index, seed, phantom: PhantomSpec, sim: SimSpec) -> SampleRecord:
    """Sample ``index`` of the dataset ``seed``; each index has its own RNG stream."""
    rng = make_rng(seed, index)
    p, weight, labels = gen_phantom(phantom, rng)
    coils = gen_coils(sim.n_coils, phantom.size, rng, sim.halfwidth_range, sim.normalize_coils)
    taus = np.asarray(sim.taus, dtype=float)
    masks = gen_masks(phantom.size, taus.size, sim.accel, sim.acs_for(phantom.size), rng)
    sigma = float(rng.uniform(*sim.sigma_range))
    k, y_true = simulate_kspace(p, coils, masks, taus, sigma, rng)
    return SampleRecord(k, masks, coils, p, weight, taus, y_true, labels, sigma,
                        {"index": index, "accel": sim.accel})


# dataset directories

_ARRAYS = ("k", "masks", "coils", "p_true", "weight_mask", "taus", "y_true", "labels")


def spec_hash(phantom: PhantomSpec, sim: SimSpec) -> str:
    blob = json.dumps({"phantom": asdict(phantom), "sim": asdict(sim)}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_sample(rec: SampleRecord, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in _ARRAYS:
        arr = getattr(rec, name)
        if arr.dtype == bool or arr.dtype.kind in "iu":
            arr = arr.astype(np.float64)
        write_tensor(arr, path / f"{name}.qten")


def read_sample(path, meta=None) -> SampleRecord:
    path = Path(path)
    arrs = {name: read_tensor(path / f"{name}.qten") for name in _ARRAYS}
    arrs["masks"] = arrs["masks"] > 0.5
    arrs["labels"] = np.rint(arrs["labels"]).astype(int)
    meta = dict(meta or {})
    return SampleRecord(**arrs, sigma=float(meta.get("sigma", 0.0)), meta=meta)


def write_dataset(out, n, seed, phantom: PhantomSpec, sim: SimSpec, jobs: int = 1):
    """Generate ``n`` samples into directory ``out``; returns the manifest dict."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        rec = make_sample(i, seed, phantom, sim)
        name = f"sample_{i:04d}"
        write_sample(rec, out / name)
        return {"id": name, "sigma": rec.sigma, "accel": sim.accel}

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(one, range(n)))
    else:
        entries = [one(i) for i in range(n)]
    manifest = {
        "format": "qpinqi-dataset-1",
        "seed": seed,
        "spec_hash": spec_hash(phantom, sim),
        "phantom": asdict(phantom),
        "sim": asdict(sim),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list))
    return manifest


class Dataset:
    """Read-only view of a dataset directory; samples are loaded on access."""

    def __init__(self, path, cache: bool = True):
        self.path = Path(path)
        mf = self.path / "manifest.json"
        if not mf.is_file():
            raise FileNotFoundError(f"no manifest.json in {self.path}")
        self.manifest = json.loads(mf.read_text())
        self.entries = self.manifest["samples"]
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> SampleRecord:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        entry = self.entries[i]
        rec = read_sample(self.path / entry["id"], entry)
        if self._cache is not None:
            self._cache[i] = rec
        return rec

    def ids(self):
        return [e["id"] for e in self.entries]

    def check_consistent(self):
        """Raise ValueError unless all samples share grid, coil count and taus."""
        if not len(self):
            raise ValueError("dataset is empty")
        ref = self[0]
        for i in range(1, len(self)):
            rec = self[i]
            if rec.k.shape != ref.k.shape or not np.array_equal(rec.taus, ref.taus):
                raise ValueError(f"sample {self.entries[i]['id']} does not match the first sample")
