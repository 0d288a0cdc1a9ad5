"""Multi-coil Cartesian encoding ``A_i = S_i F C`` with its adjoint and Gram operator.

Shapes: images ``(n_images, nx, ny)``, coil maps ``(n_coils, nx, ny)``, k-space
``(n_images, n_coils, nx, ny)`` on the full grid with zeros at unsampled points,
masks ``(n_images, ny)``. A mask entry selects one phase-encode line, i.e. all
``nx`` readout samples at that ``ky`` index. The FFT is unitary and centered, so
the middle entries of a mask are the central k-space lines.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

_AXES = (-2, -1)


def fft2c(x):
    """Centered, unitary 2D FFT over the last two axes."""
    x = sfft.ifftshift(x, axes=_AXES)
    return sfft.fftshift(sfft.fft2(x, axes=_AXES, norm="ortho"), axes=_AXES)


def ifft2c(k):
    k = sfft.ifftshift(k, axes=_AXES)
    return sfft.fftshift(sfft.ifft2(k, axes=_AXES, norm="ortho"), axes=_AXES)


def normalize_coils(coils, eps: float = 1e-12):
    """Scale coil maps so that ``sum_c |c|^2 = 1`` at every pixel."""
    coils = np.asarray(coils, dtype=complex)
    rss = np.sqrt(np.sum(np.abs(coils) ** 2, axis=0))
    return coils / np.maximum(rss, eps)


class AcquisitionModel:
    """Undersampled multi-coil Fourier encoding for a series of acquisitions.

    Parameters
    ----------
    masks : array_like of bool, shape (n_images, ny)
        Sampled phase-encode lines per acquisition.
    coils : array_like of complex, shape (n_coils, nx, ny)
        Coil sensitivity maps, used as given.
    """

    def __init__(self, masks, coils):
        masks = np.asarray(masks).astype(bool)
        coils = np.asarray(coils, dtype=complex)
        if masks.ndim != 2 or coils.ndim != 3:
            raise ValueError("masks must be (n_images, ny) and coils (n_coils, nx, ny)")
        if masks.shape[1] != coils.shape[2]:
            raise ValueError(f"mask length {masks.shape[1]} does not match ny={coils.shape[2]}")
        if not np.all(np.isfinite(coils)):
            raise ValueError("coil maps must be finite")
        self.masks = masks
        self.coils = coils
        self._kmask = masks[:, None, None, :]
        # A^H A only needs FFTs along ky: the readout transform cancels, and a
        # masked circular convolution commutes with the centering shifts
        self._gmask = sfft.ifftshift(masks, axes=-1)[:, None, None, :]

    @property
    def n_images(self):
        return self.masks.shape[0]

    @property
    def n_coils(self):
        return self.coils.shape[0]

    @property
    def image_shape(self):
        return (self.n_images,) + self.coils.shape[1:]

    @property
    def data_shape(self):
        return (self.n_images,) + self.coils.shape

    def with_coils(self, coils):
        return AcquisitionModel(self.masks, coils)

    def _check(self, arr, shape, what):
        if arr.shape != shape:
            raise ValueError(f"{what} has shape {arr.shape}, expected {shape}")

    def forward(self, y):
        y = np.asarray(y)
        self._check(y, self.image_shape, "image series")
        return self._kmask * fft2c(self.coils[None] * y[:, None])

    def adjoint(self, k):
        k = np.asarray(k)
        self._check(k, self.data_shape, "k-space")
        return np.sum(self.coils.conj()[None] * ifft2c(self._kmask * k), axis=1)

    def gram(self, y, shift: float = 0.0):
        """``A^H A y + shift * y``."""
        y = np.asarray(y)
        self._check(y, self.image_shape, "image series")
        coil_k = self._gmask * sfft.fft(self.coils[None] * y[:, None], axis=-1)
        out = np.sum(self.coils.conj()[None] * sfft.ifft(coil_k, axis=-1), axis=1)
        if shift:
            out = out + shift * y
        return out
