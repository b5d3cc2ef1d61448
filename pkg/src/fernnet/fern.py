"""Differentiable random-fern ensemble layer.

Each fern ``k`` looks at ``m`` fixed columns ``dims[k]`` of an unfolded
feature row and compares them to thresholds through ``c = tanh(x - t)``.
The signs of ``c`` form an m-bit code (MSB first, ``c > 0`` sets the bit)
which, offset by ``k * 2**m``, addresses one row of a shared lookup table.
The layer output for a row is the sum over ferns of that table row scaled by
an instance weight computed from ``|c|``.  The index carries no gradient;
the weight and the gathered table rows do.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import kernels
from ._kernels_numpy import encode_bits, weight_from_c, weight_grad_from_c
from .errors import ConfigError, ContractError, DimensionError, GeometryError
from .layers import Module
from .spatial import Geometry, UnfoldedFeatureMatrix, fold, unfold, unfold_array
from .tensor import Tensor, record_op, resolve_dtype

MAX_DEPTH = 24


class WeightMode(str, enum.Enum):
    LITERAL_L2 = "literal_l2"
    NORMALIZED_PROXIMITY = "normalized_proximity"
    MEAN_L1_PROXIMITY = "mean_l1"

    @property
    def code(self) -> int:
        return _MODE_CODES[self]

    @classmethod
    def parse(cls, value: Union[str, "WeightMode"]) -> "WeightMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise ConfigError(f"unknown weight mode {value!r}; choose from "
                          f"{[m.value for m in cls]}")


_MODE_CODES = {WeightMode.LITERAL_L2: 0, WeightMode.NORMALIZED_PROXIMITY: 1,
               WeightMode.MEAN_L1_PROXIMITY: 2}


@dataclass(frozen=True)
class FernConfig:
    n_ferns: int
    depth: int
    in_dim: int
    c_out: int
    weight_mode: WeightMode = WeightMode.LITERAL_L2
    thresholds_trainable: bool = True
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode.parse(self.weight_mode))
        if self.n_ferns < 1 or self.in_dim < 1 or self.c_out < 1:
            raise ConfigError(f"fern counts must be positive: K={self.n_ferns}, "
                              f"in_dim={self.in_dim}, c_out={self.c_out}")
        if not 1 <= self.depth <= MAX_DEPTH:
            raise ConfigError(f"fern depth {self.depth} outside [1, {MAX_DEPTH}]")
        if self.n_ferns * (1 << self.depth) >= 2 ** 63:
            raise ConfigError("lookup table size overflows a 64-bit index")
        resolve_dtype(self.dtype)

    @property
    def n_cells(self) -> int:
        return self.n_ferns << self.depth


@dataclass
class FernEnsembleLayer:
    dims: np.ndarray  # int64, K x m, frozen
    thresholds: Tensor  # K x m
    lut: Tensor  # (K * 2**m) x c_out
    offsets: np.ndarray  # int64, K
    config: FernConfig

    @property
    def dtype(self) -> np.dtype:
        return self.lut.dtype


def fern_init(config: FernConfig) -> FernEnsembleLayer:
    """Draw fern structure and initial parameters from ``config.seed``.

    dims ~ U{0..in_dim-1} with replacement, thresholds ~ N(0, 1) and the
    table ~ N(0, 1/sqrt(K)) so the K-fern sum starts at unit scale.
    """
    rng = np.random.default_rng(config.seed)
    k, m = config.n_ferns, config.depth
    dims = rng.integers(0, config.in_dim, size=(k, m), dtype=np.int64)
    thresholds = Tensor(rng.standard_normal((k, m)), requires_grad=config.thresholds_trainable,
                        dtype=config.dtype)
    lut = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k), size=(config.n_cells, config.c_out)),
                 requires_grad=True, dtype=config.dtype)
    offsets = np.arange(k, dtype=np.int64) << m
    return FernEnsembleLayer(dims, thresholds, lut, offsets, config)


def _rows_array(rows) -> np.ndarray:
    if isinstance(rows, UnfoldedFeatureMatrix):
        rows = rows.data
    if isinstance(rows, Tensor):
        rows = rows.data
    return np.asarray(rows)


def fern_response(rows, layer: FernEnsembleLayer) -> np.ndarray:
    """tanh(row[dims] - thresholds) for one row (-> K x m) or many (-> R x K x m)."""
    x = _rows_array(rows)
    if x.shape[-1] != layer.config.in_dim:
        raise DimensionError(f"row length {x.shape[-1]} != fern in_dim {layer.config.in_dim}")
    return np.tanh(x[..., layer.dims] - layer.thresholds.data)


def index_encode(c: np.ndarray, layer: FernEnsembleLayer) -> np.ndarray:
    """Lookup-table row per fern: offset + MSB-first bits of ``c > 0``."""
    return layer.offsets + encode_bits(np.asarray(c))


def instance_weight(c_k, mode: Union[str, WeightMode] = WeightMode.LITERAL_L2) -> np.ndarray:
    """Weight of a fern from its responses ``c_k`` (shape ``(..., m)``).

    ``literal_l2``: ||abs(c) - 1||_2; ``normalized_proximity``: 1 - that
    norm / sqrt(m); ``mean_l1``: 1 - mean(1 - abs(c)).
    """
    return weight_from_c(np.asarray(c_k), WeightMode.parse(mode).code)


def instance_weight_grad(c_k, mode: Union[str, WeightMode] = WeightMode.LITERAL_L2) -> np.ndarray:
    return weight_grad_from_c(np.asarray(c_k), WeightMode.parse(mode).code)


@dataclass
class FernForwardContext:
    c: np.ndarray  # R x K x m
    indices: np.ndarray  # R x K
    weights: np.ndarray  # R x K
    rows: Tensor
    layer: FernEnsembleLayer


def fern_forward(ufm, layer: FernEnsembleLayer, backend=None) -> tuple[Tensor, FernForwardContext]:
    """Weighted lookup-table sum for every row of an unfolded feature matrix.

    ``out[u] = sum_k w[u, k] * lut[idx[u, k]]``.  When a tape is active the
    output is recorded with :func:`fern_backward` as its backward rule.
    """
    rows = ufm.data if isinstance(ufm, UnfoldedFeatureMatrix) else ufm
    if not isinstance(rows, Tensor):
        rows = Tensor(rows, dtype=layer.dtype)
    if rows.ndim != 2 or rows.shape[1] != layer.config.in_dim:
        raise DimensionError(f"fern layer expects R x {layer.config.in_dim} rows, got {rows.shape}")
    if rows.dtype != layer.dtype:
        raise ContractError(f"rows are {rows.dtype} but fern layer is {layer.dtype}")
    impl = backend or kernels.active()
    out, c, idx, w = impl.forward(rows.data, layer.dims, layer.thresholds.data, layer.lut.data,
                                  layer.config.weight_mode.code)
    ctx = FernForwardContext(c, idx, w, rows, layer)

    def backward(g):
        grad_lut, grad_thr, grad_rows = fern_backward(ctx, g, layer, backend=impl)
        return grad_rows, grad_thr, grad_lut

    return record_op(out, (rows, layer.thresholds, layer.lut), backward), ctx


def fern_backward(ctx: FernForwardContext, grad_out, layer: FernEnsembleLayer, backend=None):
    """Gradients of the fern layer: ``(grad_lut, grad_thresholds, grad_input_rows)``.

    The table gradient is a scatter-add of ``w * grad_out`` onto the gathered
    rows; everything else flows through the instance weight and tanh.
    """
    g = np.asarray(grad_out.data if isinstance(grad_out, Tensor) else grad_out)
    r = ctx.c.shape[0]
    if ctx.layer is not layer:
        raise ContractError("context was produced by a different fern layer")
    if g.shape != (r, layer.config.c_out):
        raise ContractError(f"grad_out shape {g.shape} != forward output {(r, layer.config.c_out)}")
    impl = backend or kernels.active()
    return impl.backward(ctx.c, ctx.indices, ctx.weights, layer.lut.data,
                         np.ascontiguousarray(g, dtype=layer.dtype), layer.dims,
                         layer.config.weight_mode.code, layer.config.in_dim)


def fern_conv_layer(x: Tensor, layer: FernEnsembleLayer, k: int, stride: int = 1,
                    padding: int = 0) -> Tensor:
    """Convolution drop-in: unfold, fern ensemble per row, fold."""
    if x.ndim != 4 or x.shape[1] * k * k != layer.config.in_dim:
        raise GeometryError(f"fern in_dim {layer.config.in_dim} does not match C*k*k for input "
                            f"{x.shape} and k={k}")
    ufm = unfold(x, k, stride, padding)
    out, _ = fern_forward(ufm, layer)
    return fold(out, ufm.geometry)


def min_abs_response(x: np.ndarray, layer: FernEnsembleLayer, k: int, stride: int,
                     padding: int) -> float:
    """Smallest |c| over every row of ``x``; distance of the input from an index flip."""
    geom = Geometry.create(x.shape, k, stride, padding)
    return float(np.abs(fern_response(unfold_array(x, geom), layer)).min())


class FernConv(Module):
    kind = "fern"

    def __init__(self, config: FernConfig, k: int, stride: int = 1, padding: int = 0,
                 c_in: Optional[int] = None):
        self.layer = fern_init(config)
        self.k, self.stride, self.padding = k, stride, padding
        self.c_in = c_in if c_in is not None else config.in_dim // (k * k)

    @property
    def config(self) -> FernConfig:
        return self.layer.config

    def forward(self, x, training=False):
        return fern_conv_layer(x, self.layer, self.k, self.stride, self.padding)

    def parameters(self):
        return {"thresholds": self.layer.thresholds, "lut": self.layer.lut}

    def buffers(self):
        return {"dims": self.layer.dims, "offsets": self.layer.offsets}

    def output_shape(self, input_shape):
        n, _, h, w = input_shape
        return (n, self.config.c_out, (h + 2 * self.padding - self.k) // self.stride + 1,
                (w + 2 * self.padding - self.k) // self.stride + 1)

    def min_margin(self, x: np.ndarray) -> float:
        return min_abs_response(x, self.layer, self.k, self.stride, self.padding)
