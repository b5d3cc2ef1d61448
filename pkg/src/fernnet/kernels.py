"""Backend selection for the fern hot loops.

The compiled ``_fernkernels`` extension is used when it imports; otherwise the
numpy/scipy implementation takes over.  ``FERNNET_BACKEND=numpy`` forces the
fallback.  Both backends expose::

    forward(rows, dims, thresholds, lut, mode) -> (out, c, idx, w)
    backward(c, idx, w, lut, grad_out, dims, mode, in_dim) -> (grad_lut, grad_thr, grad_rows)
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

from . import _kernels_numpy

try:
    from . import _fernkernels as _ext
except ImportError:  # extension not built
    _ext = None


def _contiguous(dtype, *arrays):
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def _cython_forward(rows, dims, thr, lut, mode):
    r, (k, m) = rows.shape[0], dims.shape
    dt = rows.dtype
    # numpy's vectorized tanh beats a scalar libm call per response
    (c,) = _contiguous(dt, np.tanh(rows[:, dims] - thr))
    (lut,) = _contiguous(dt, lut)
    idx = np.empty((r, k), dtype=np.int64)
    w = np.empty((r, k), dtype=dt)
    out = np.empty((r, lut.shape[1]), dtype=dt)
    _ext.fern_forward(c, lut, mode, idx, w, out)
    return out, c, idx, w


def _cython_backward(c, idx, w, lut, grad_out, dims, mode, in_dim):
    dt = lut.dtype
    c, w, lut, grad_out = _contiguous(dt, c, w, lut, grad_out)
    idx, dims = _contiguous(np.int64, idx, dims)
    grad_lut = np.zeros_like(lut)
    grad_thr = np.zeros(dims.shape, dtype=dt)
    grad_rows = np.zeros((c.shape[0], in_dim), dtype=dt)
    _ext.fern_backward(c, idx, w, lut, grad_out, dims, mode,
                       grad_lut, grad_thr, grad_rows)
    return grad_lut, grad_thr, grad_rows


BACKENDS = {
    "numpy": SimpleNamespace(name="numpy", forward=_kernels_numpy.fern_forward,
                             backward=_kernels_numpy.fern_backward),
}
if _ext is not None:
    BACKENDS["cython"] = SimpleNamespace(name="cython", forward=_cython_forward,
                                         backward=_cython_backward)


def _default_backend() -> str:
    requested = os.environ.get("FERNNET_BACKEND", "").strip().lower()
    if requested:
        if requested not in BACKENDS:
            raise ImportError(f"FERNNET_BACKEND={requested!r} is not available; "
                              f"have {sorted(BACKENDS)}")
        return requested
    return "cython" if "cython" in BACKENDS else "numpy"


_active = BACKENDS[_default_backend()]


def active():
    return _active


def backend_name() -> str:
    return _active.name


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]


def available() -> list[str]:
    return sorted(BACKENDS)
