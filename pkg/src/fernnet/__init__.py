"""Differentiable random-fern layers as a multiplication-free convolution replacement."""
from .config import ModelConfig, TrainConfig, load_config, reference_architecture
from .fern import (FernConfig, FernConv, FernEnsembleLayer, WeightMode, fern_backward,
                   fern_conv_layer, fern_forward, fern_init, fern_response, index_encode,
                   instance_weight)
from .kernels import backend_name
from .spatial import fold, unfold
from .tensor import Tape, Tensor
from .train import Model, build_model, evaluate, train_epochs

__all__ = [
    "FernConfig", "FernConv", "FernEnsembleLayer", "Model", "ModelConfig", "Tape", "Tensor",
    "TrainConfig", "WeightMode", "backend_name", "build_model", "evaluate", "fern_backward",
    "fern_conv_layer", "fern_forward", "fern_init", "fern_response", "fold", "index_encode",
    "instance_weight", "load_config", "reference_architecture", "train_epochs", "unfold",
]
__version__ = "0.1.0"
