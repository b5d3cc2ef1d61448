"""Batch norm, ReLU, pooling, float convolution and a binary-weight convolution.

The float and binary convolutions are the comparison baselines for the fern
layer; both lower to unfold -> matmul -> fold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, GeometryError
from .spatial import fold, unfold
from .tensor import Tensor, matmul, record_op, reduce, relu, reshape, transpose


class Module:
    """Minimal layer protocol used by :class:`fernnet.train.Model`."""

    kind = "module"

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    def parameters(self) -> dict[str, Tensor]:
        """Named parameter tensors, frozen ones included (``requires_grad=False``)."""
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint round trip."""
        return {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)


# -- batch norm ----------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype="f32", momentum: float = 0.1, epsilon: float = 1e-5):
        g = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        return cls(g, b, np.zeros(channels, dtype=g.dtype), np.ones(channels, dtype=g.dtype),
                   momentum, epsilon)


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalisation of an N x C x H x W tensor.

    In ``train`` mode batch statistics are used and the running estimates
    are updated (unbiased variance); in ``eval`` mode the running estimates
    are applied as a fixed affine map.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batchnorm over {state.gamma.shape[0]} channels got input {x.shape}")
    c = x.shape[1]
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    if state.mode == "train":
        if count == 0:
            raise ContractError("batchnorm in train mode needs a non-empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    elif state.mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ContractError(f"unknown batchnorm mode {state.mode!r}")
    inv = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv
    training = state.mode == "train"

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dx = gamma * inv / count * (
                count * g - dbeta.reshape(1, c, 1, 1) - xhat * dgamma.reshape(1, c, 1, 1))
        else:
            dx = g * gamma * inv
        return dx, dgamma, dbeta

    return record_op(gamma * xhat + beta, (x, state.gamma, state.beta), backward)


class BatchNorm2d(Module):
    kind = "bn"

    def __init__(self, channels: int, dtype="f32", momentum: float = 0.1, epsilon: float = 1e-5):
        self.channels = channels
        self.state = BatchNormState.create(channels, dtype, momentum, epsilon)

    def forward(self, x, training=False):
        self.state.mode = "train" if training else "eval"
        return batchnorm(x, self.state)

    def parameters(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}


# -- activations, pooling, reshaping --------------------------------------------

class ReLU(Module):
    kind = "relu"

    def forward(self, x, training=False):
        return relu(x)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average over H x W: N x C x H x W -> N x C x 1 x 1."""
    n, c = x.shape[:2]
    return reshape(reduce(x, "mean", axis=(2, 3)), (n, c, 1, 1))


class AdaptiveAvgPool(Module):
    kind = "pool"

    def forward(self, x, training=False):
        return adaptive_avg_pool(x)

    def output_shape(self, input_shape):
        n, c = input_shape[:2]
        return (n, c, 1, 1)


class Flatten(Module):
    kind = "flatten"

    def forward(self, x, training=False):
        return reshape(x, (x.shape[0], -1))

    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))


# -- convolutions --------------------------------------------------------------

def add_bias(rows: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C bias to every row of an R x C matrix."""
    if rows.ndim != 2 or bias.shape != (rows.shape[1],):
        raise DimensionError(f"bias of shape {bias.shape} does not fit rows {rows.shape}")
    return record_op(rows.data + bias.data, (rows, bias), lambda g: (g, g.sum(axis=0)))


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor]
    k: int
    stride: int = 1
    padding: int = 0

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


def _check_geometry(x: Tensor, weight_cols: int, k: int) -> None:
    if x.ndim != 4 or x.shape[1] * k * k != weight_cols:
        raise GeometryError(
            f"weight expects C_in*k*k = {weight_cols} columns, input {x.shape} with k={k} "
            f"gives {x.shape[1] * k * k if x.ndim == 4 else '?'}")


def _conv_with_weight(x: Tensor, weight: Tensor, bias: Optional[Tensor], k, stride, padding):
    _check_geometry(x, weight.shape[1], k)
    ufm = unfold(x, k, stride, padding)
    rows = matmul(ufm.data, transpose(weight))
    if bias is not None:
        rows = add_bias(rows, bias)
    return fold(rows, ufm.geometry)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    return _conv_with_weight(x, params.weight, params.bias, params.k, params.stride, params.padding)


def _sign(w: np.ndarray) -> np.ndarray:
    return np.where(w >= 0, 1, -1).astype(w.dtype)


@dataclass
class BinaryConvParams:
    real_weight: Tensor
    bias: Optional[Tensor]
    k: int
    stride: int = 1
    padding: int = 0
    clip: float = field(default=1.0)

    @property
    def sign_weight(self) -> np.ndarray:
        return _sign(self.real_weight.data)

    @property
    def alpha(self) -> np.ndarray:
        return np.abs(self.real_weight.data).mean(axis=1)

    @property
    def c_out(self) -> int:
        return self.real_weight.shape[0]


def binarize(real_weight: Tensor, clip: float = 1.0) -> Tensor:
    """alpha[o] * sign(W[o]) with a clipped straight-through backward rule."""
    w = real_weight.data
    alpha = np.abs(w).mean(axis=1, keepdims=True)
    mask = np.abs(w) <= clip
    return record_op(alpha * _sign(w), (real_weight,), lambda g: (g * mask,))


def binary_conv2d(x: Tensor, params: BinaryConvParams) -> Tensor:
    weight = binarize(params.real_weight, params.clip)
    return _conv_with_weight(x, weight, params.bias, params.k, params.stride, params.padding)


def _init_weight(rng: np.random.Generator, c_out: int, cols: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / cols), size=(c_out, cols)),
                  requires_grad=True, dtype=dtype)


class Conv2d(Module):
    kind = "conv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, bias=True, rng=None, dtype="f32"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in = c_in
        b = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype) if bias else None
        self.params = ConvParams(_init_weight(rng, c_out, c_in * k * k, dtype), b, k, stride, padding)

    def forward(self, x, training=False):
        return conv2d(x, self.params)

    def parameters(self):
        out = {"weight": self.params.weight}
        if self.params.bias is not None:
            out["bias"] = self.params.bias
        return out

    def output_shape(self, input_shape):
        n, _, h, w = input_shape
        p = self.params
        return (n, p.c_out, (h + 2 * p.padding - p.k) // p.stride + 1,
                (w + 2 * p.padding - p.k) // p.stride + 1)


class BinaryConv2d(Conv2d):
    kind = "binconv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, bias=True, rng=None, dtype="f32"):
        super().__init__(c_in, c_out, k, stride, padding, bias, rng, dtype)
        p = self.params
        self.params = BinaryConvParams(p.weight, p.bias, k, stride, padding)

    def forward(self, x, training=False):
        return binary_conv2d(x, self.params)

    def parameters(self):
        out = {"weight": self.params.real_weight}
        if self.params.bias is not None:
            out["bias"] = self.params.bias
        return out
