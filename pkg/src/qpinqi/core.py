"""Shared array conventions, deterministic random streams and the QTEN1 file format.

Arrays are plain :class:`numpy.ndarray` objects. All differentiable math runs in
float64/complex128; float32 is accepted only for storage.

Complex gradients
-----------------
A gradient of a real loss ``L`` with respect to a complex array ``z`` is stored as
``dL/dRe(z) + 1j * dL/dIm(z)``, which is twice the conjugate Wirtinger derivative.
With this choice a first-order change of the loss is ``Re(vdot(grad, dz))``, and
the expressions used by the solvers' backward passes (for example
``Re((y_i - y)^H g)`` for a regularization weight) hold without extra factors.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"QTEN1\n"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "complex64": np.dtype("<c8"),
    "complex128": np.dtype("<c16"),
}


class TensorFormatError(ValueError):
    """Base class for malformed QTEN1 files."""


class BadMagicError(TensorFormatError):
    pass


class DtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def _dtype_name(dtype: np.dtype) -> str:
    for name, dt in _DTYPES.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return name
    raise DtypeError(f"unsupported dtype {dtype}")


def write_tensor(t, path) -> None:
    """Write an array to ``path`` in the QTEN1 format.

    The file is the magic line, one JSON header line and the raw little-endian
    row-major payload. The write goes to a temporary file that is renamed into
    place, so a failure never leaves a partial file behind.
    """
    arr = np.asarray(t)
    if arr.dtype == np.bool_:
        raise DtypeError("boolean tensors must be converted to float before writing")
    name = _dtype_name(arr.dtype)
    header = json.dumps({"dtype": name, "shape": list(arr.shape), "order": "row-major"})
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes(order="C")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".qten")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header.encode("ascii") + b"\n")
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path) -> np.ndarray:
    """Read a QTEN1 file written by :func:`write_tensor`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise BadMagicError(f"{path}: missing QTEN1 magic")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise TruncatedPayloadError(f"{path}: header line not terminated")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise TensorFormatError(f"{path}: bad header ({exc})") from None
    if header.get("order", "row-major") != "row-major":
        raise TensorFormatError(f"{path}: unsupported order {header['order']!r}")
    name = header.get("dtype")
    if name not in _DTYPES:
        raise DtypeError(f"{path}: unsupported dtype {name!r}")
    dtype = _DTYPES[name]
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    payload = data[end + 1:]
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, shape {list(shape)} needs {expected}"
        )
    if len(payload) > expected:
        raise TensorFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def inner_product(a, b) -> complex:
    """Return ``sum(conj(a) * b)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return complex(np.vdot(a, b))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional sub-stream path.

    ``make_rng(seed, i)`` gives the independent stream of sample ``i``, so
    samples can be generated in any order or in parallel with identical results.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


def t1_from_r1(r1, floor: float = 1e-6) -> np.ndarray:
    """T1 in seconds from R1 in 1/s, with R1 floored at ``floor``."""
    return 1.0 / np.maximum(np.asarray(r1, dtype=float), floor)


class SolverError(ArithmeticError):
    """An inner solver met non-finite values or an invalid problem."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration
