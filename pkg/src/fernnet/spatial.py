"""im2col / col2im lowering between feature maps and row matrices.

Row ``u`` of an unfolded matrix is the receptive field of output position
``u = n*H_out*W_out + y*W_out + x``; columns run channel-major, then kernel
row, then kernel column.  Fern dimension indices refer to this column order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryError
from .tensor import Tensor, record_op


@dataclass(frozen=True)
class Geometry:
    n: int
    c_in: int
    h: int
    w: int
    k: int
    stride: int
    padding: int
    h_out: int
    w_out: int

    @classmethod
    def create(cls, input_shape, k: int, stride: int, padding: int) -> "Geometry":
        if len(input_shape) != 4:
            raise GeometryError(f"expected an N x C x H x W input, got shape {tuple(input_shape)}")
        n, c, h, w = (int(v) for v in input_shape)
        if k < 1 or stride < 1 or padding < 0:
            raise GeometryError(f"invalid geometry k={k}, stride={stride}, padding={padding}")
        if h + 2 * padding < k or w + 2 * padding < k:
            raise GeometryError(
                f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
        h_out = (h + 2 * padding - k) // stride + 1
        w_out = (w + 2 * padding - k) // stride + 1
        return cls(n, c, h, w, k, stride, padding, h_out, w_out)

    @property
    def rows(self) -> int:
        return self.n * self.h_out * self.w_out

    @property
    def cols(self) -> int:
        return self.c_in * self.k * self.k

    def output_shape(self, c_out: int) -> tuple:
        return (self.n, c_out, self.h_out, self.w_out)


@dataclass(frozen=True)
class UnfoldedFeatureMatrix:
    data: Tensor
    geometry: Geometry

    @property
    def shape(self) -> tuple:
        return self.data.shape


def unfold_array(x: np.ndarray, geom: Geometry) -> np.ndarray:
    k, s, p = geom.k, geom.stride, geom.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : s * (geom.h_out - 1) + 1 : s, : s * (geom.w_out - 1) + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(geom.rows, geom.cols)


def unfold_backward_array(g: np.ndarray, geom: Geometry) -> np.ndarray:
    """Scatter-add row gradients back onto the (unpadded) input positions."""
    k, s, p = geom.k, geom.stride, geom.padding
    g6 = g.reshape(geom.n, geom.h_out, geom.w_out, geom.c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((geom.n, geom.c_in, geom.h + 2 * p, geom.w + 2 * p), dtype=g.dtype)
    ys, xs = s * (geom.h_out - 1) + 1, s * (geom.w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + ys : s, j : j + xs : s] += g6[..., i, j]
    return out[:, :, p : p + geom.h, p : p + geom.w]


def unfold(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> UnfoldedFeatureMatrix:
    """im2col: lower ``x`` (N x C x H x W) to an ``R x C*k*k`` row matrix, zero padded."""
    geom = Geometry.create(x.shape, k, stride, padding)
    rows = record_op(unfold_array(x.data, geom), (x,),
                     lambda g: (unfold_backward_array(g, geom),))
    return UnfoldedFeatureMatrix(rows, geom)


def fold(rows: Tensor, geom: Geometry) -> Tensor:
    """Reshape per-position output rows (R x C_out) into an N x C_out x H_out x W_out map.

    This is the output-side col2im; every position owns exactly one row, so
    no overlap-add is involved.
    """
    if rows.ndim != 2 or rows.shape[0] != geom.rows:
        raise GeometryError(
            f"fold expects {geom.rows} rows for N={geom.n}, H_out={geom.h_out}, "
            f"W_out={geom.w_out}; got shape {rows.shape}")
    c = rows.shape[1]
    data = rows.data.reshape(geom.n, geom.h_out, geom.w_out, c).transpose(0, 3, 1, 2)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(geom.rows, c),)

    return record_op(data, (rows,), backward)


def fold_inverse(x: Tensor) -> Tensor:
    """Flatten an N x C x H x W map to (N*H*W) x C rows, the exact inverse of :func:`fold`."""
    n, c, h, w = x.shape
    data = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    return record_op(data, (x,), lambda g: (g.reshape(n, h, w, c).transpose(0, 3, 1, 2),))
