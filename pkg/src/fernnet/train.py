"""Model assembly, loss, optimizers, training loop and gradient checking."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import LayerSpec, ModelConfig, TrainConfig
from .errors import ContractError, DataError, FernNetError, SamplingError
from .fern import FernConfig, FernConv
from .layers import AdaptiveAvgPool, BatchNorm2d, BinaryConv2d, Conv2d, Flatten, Module, ReLU
from .tensor import Tape, Tensor, record_op, resolve_dtype

log = logging.getLogger(__name__)


class DivergenceError(FernNetError, FloatingPointError):
    """Training produced a non-finite loss."""


class Model:
    """A sequence of named layers ending in N x n_classes logits."""

    def __init__(self, layers: Sequence[tuple[str, Module]], config: Optional[ModelConfig] = None):
        self.layers = list(layers)
        self.config = config

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        for _, layer in self.layers:
            x = layer(x, training)
        return x

    __call__ = forward

    @property
    def dtype(self):
        return resolve_dtype(self.config.dtype if self.config else "f32")

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{name}.{key}": t for name, layer in self.layers
                for key, t in layer.parameters().items()}

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{key}": b for name, layer in self.layers
                for key, b in layer.buffers().items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ContractError(f"state mismatch; missing {missing}, unexpected {extra}")
        for key, value in state.items():
            target = params[key].data if key in params else buffers[key]
            if target.shape != value.shape or target.dtype != value.dtype:
                raise ContractError(f"{key}: stored {value.dtype}{value.shape} does not match "
                                    f"{target.dtype}{target.shape}")
            target[...] = value


def _make_block(spec: LayerSpec, backbone: str, config: ModelConfig,
                rng: np.random.Generator) -> Module:
    if backbone == "fern":
        fern_cfg = FernConfig(
            n_ferns=config.fern.n_ferns, depth=config.fern.depth,
            in_dim=spec.c_in * spec.kernel ** 2, c_out=spec.c_out,
            weight_mode=config.fern.weight_mode,
            thresholds_trainable=config.fern.thresholds_trainable,
            seed=int(rng.integers(2 ** 31)), dtype=config.dtype)
        return FernConv(fern_cfg, spec.kernel, spec.stride, spec.padding, c_in=spec.c_in)
    cls = Conv2d if backbone == "conv" else BinaryConv2d
    return cls(spec.c_in, spec.c_out, spec.kernel, spec.stride, spec.padding,
               bias=True, rng=rng, dtype=config.dtype)


def build_model(config: ModelConfig) -> Model:
    """Instantiate ``config`` layer by layer.

    Fern blocks get no activation (index binarisation is the nonlinearity);
    conv and binconv blocks followed by BN get a ReLU.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    layers: list[tuple[str, Module]] = []
    for i, spec in enumerate(config.layers, 1):
        if spec.kind == "pool":
            layers.append((f"{i}.pool", AdaptiveAvgPool()))
            continue
        backbone = config.layer_backbone(spec)
        layers.append((f"{i}.{backbone}", _make_block(spec, backbone, config, rng)))
        if spec.norm == "bn":
            layers.append((f"{i}.bn", BatchNorm2d(spec.c_out, config.dtype, config.bn_momentum,
                                                  config.bn_epsilon)))
            if backbone != "fern":
                layers.append((f"{i}.relu", ReLU()))
    layers.append(("flatten", Flatten()))
    return Model(layers, config)


# -- loss ------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DataError(f"labels of shape {labels.shape} do not match logits {logits.shape}")
    n, n_classes = logits.shape
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}); got range "
                        f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- optimizers --------------------------------------------------------------------

def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: dict,
                   config: TrainConfig) -> None:
    """One in-place update.  ``state`` holds per-parameter moments and the step count.

    SGD: ``v = g + momentum * v; p -= lr * v``.  Adam: bias-corrected moments.
    """
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if config.optimizer == "sgd":
            if config.momentum:
                v = state.setdefault(("v", i), np.zeros_like(p.data))
                v *= config.momentum
                v += g
                step = v
            else:
                step = g
            p.data -= (config.lr * step).astype(p.dtype)
        else:
            m = state.setdefault(("m", i), np.zeros_like(p.data))
            v = state.setdefault(("v", i), np.zeros_like(p.data))
            m *= config.beta1
            m += (1 - config.beta1) * g
            v *= config.beta2
            v += (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** t)
            v_hat = v / (1 - config.beta2 ** t)
            p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype)


class Optimizer:
    def __init__(self, params: Iterable[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state, self.config)


# -- data and loops ----------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray  # N, int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"inconsistent dataset: images {self.images.shape}, "
                            f"labels {np.shape(self.labels)}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    wall_seconds: float


def _require_nonempty(ds: Dataset) -> None:
    if len(ds) == 0:
        raise DataError("dataset is empty")


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model(Tensor(images[i:i + batch_size], dtype=model.dtype), training=False).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label (BN in eval mode)."""
    _require_nonempty(ds)
    logits = predict_logits(model, ds.images, batch_size)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def evaluate_loss(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    _require_nonempty(ds)
    logits = predict_logits(model, ds.images, batch_size)
    return softmax_cross_entropy(Tensor(logits), ds.labels).item()


def train_epochs(model: Model, train: Dataset, config: TrainConfig,
                 test: Optional[Dataset] = None,
                 on_epoch: Optional[Callable[[EpochRecord], None]] = None,
                 stop: Optional[Callable[[list], bool]] = None) -> list[EpochRecord]:
    """Minibatch training; shuffles with ``config.seed`` so runs are reproducible.

    ``train_loss`` is the sample-weighted mean of the minibatch losses seen
    during the epoch.  Test accuracy falls back to the training set.  If
    ``stop(history)`` returns true after an epoch, training ends early.
    """
    _require_nonempty(train)
    test = test if test is not None else train
    _require_nonempty(test)
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(model.trainable_parameters(), config)
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            x = Tensor(train.images[batch], dtype=model.dtype)
            opt.zero_grad()
            with Tape() as tape:
                loss = softmax_cross_entropy(model(x, training=True), train.labels[batch])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {lo}")
            tape.backward(loss)
            opt.step()
            total += value * len(batch)
        record = EpochRecord(epoch, total / len(train), evaluate(model, test),
                             time.perf_counter() - start)
        log.info("epoch %d loss %.5f acc %.4f", record.epoch, record.train_loss,
                 record.test_accuracy)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stop is not None and stop(history):
            break
    return history


# -- gradient checking -------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |numeric|), the finite difference being the reference."""
    if analytic.size == 0:
        return 0.0
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))).max())


def grad_check(fragment: Callable[[Tensor], Tensor], params: Sequence[Tensor], x,
               epsilon: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    The scalar probed is ``sum(fragment(x) * P)`` for a fixed random ``P``.
    Every coordinate of every parameter and of ``x`` is perturbed; all
    tensors must be float64.
    """
    x = x if isinstance(x, Tensor) else Tensor(x, dtype="f64")
    for t in [x, *params]:
        if t.dtype != np.float64:
            raise ContractError("gradient checking requires f64 tensors")
    probe_shape = fragment(x).shape
    proj = Tensor(np.random.default_rng(seed).standard_normal(probe_shape), dtype="f64")

    def objective() -> float:
        out = fragment(x)
        return float((out.data * proj.data).sum())

    x.requires_grad = True
    targets = [x, *params]
    saved = [t.requires_grad for t in params]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = (fragment(x) * proj).sum()
        tape.backward(loss)
        worst = 0.0
        for t in targets:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.empty_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = objective()
                flat[i] = orig - epsilon
                down = objective()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * epsilon)
            worst = max(worst, relative_error(analytic, numeric))
    finally:
        for t, flag in zip(params, saved):
            t.requires_grad = flag
            t.grad = None
        x.requires_grad = False
        x.grad = None
    return worst


def sample_with_margin(draw: Callable[[np.random.Generator], np.ndarray],
                       margin_of: Callable[[np.ndarray], float], margin: float,
                       rng: np.random.Generator, max_draws: int = 1000) -> np.ndarray:
    """Redraw inputs until ``margin_of(x) >= margin``; give up after ``max_draws``."""
    for _ in range(max_draws):
        x = draw(rng)
        if margin <= 0 or margin_of(x) >= margin:
            return x
    raise SamplingError(f"no input with margin {margin} found in {max_draws} draws")


# -- layer-kind gradient checks ----------------------------------------------------

GRADCHECK_TOLERANCE = {"fern": 1e-5, "conv": 1e-6, "batchnorm": 1e-6, "loss": 1e-6}


@dataclass
class Fragment:
    fn: Callable[[Tensor], Tensor]
    params: list
    draw: Callable[[np.random.Generator], np.ndarray]
    margin_of: Callable[[np.ndarray], float] = lambda x: math.inf


def fern_fragment(rng: np.random.Generator, mode, depth: int = 3) -> Fragment:
    cfg = FernConfig(n_ferns=4, depth=depth, in_dim=2 * 9, c_out=3, weight_mode=mode,
                     seed=int(rng.integers(2 ** 31)), dtype="f64")
    layer = FernConv(cfg, k=3, stride=1, padding=0)
    return Fragment(lambda x: layer(x, True), [layer.layer.thresholds, layer.layer.lut],
                    lambda r: r.standard_normal((2, 2, 4, 4)), layer.min_margin)


def conv_fragment(rng: np.random.Generator) -> Fragment:
    layer = Conv2d(2, 3, 3, stride=1, padding=1, rng=rng, dtype="f64")
    layer.params.bias.data[:] = rng.standard_normal(3)
    return Fragment(lambda x: layer(x, True), list(layer.parameters().values()),
                    lambda r: r.standard_normal((2, 2, 4, 4)))


def batchnorm_fragment(rng: np.random.Generator) -> Fragment:
    layer = BatchNorm2d(3, dtype="f64")
    layer.state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    layer.state.beta.data[:] = rng.standard_normal(3)
    return Fragment(lambda x: layer(x, True), list(layer.parameters().values()),
                    lambda r: 2 * r.standard_normal((4, 3, 3, 3)) + 0.5)


def loss_fragment(rng: np.random.Generator) -> Fragment:
    labels = rng.integers(0, 2, size=6)
    return Fragment(lambda x: softmax_cross_entropy(x, labels), [],
                    lambda r: 3 * r.standard_normal((6, 2)))


def gradcheck_kinds(modes=("literal_l2", "normalized_proximity", "mean_l1"),
                    depth: int = 3) -> dict:
    kinds = {f"fern[{m}]": (lambda rng, m=m: fern_fragment(rng, m, depth)) for m in modes}
    kinds.update(conv=conv_fragment, batchnorm=batchnorm_fragment, loss=loss_fragment)
    return kinds


def tolerance_for(kind: str) -> float:
    return GRADCHECK_TOLERANCE[kind.split("[")[0]]


def run_gradcheck(trials: int = 100, margin: float = 1e-3, epsilon: float = 1e-6,
                  seed: int = 0, kinds: Optional[dict] = None) -> dict[str, float]:
    """Worst relative error per layer kind over ``trials`` random fragments."""
    if trials < 1:
        raise ContractError(f"trials must be at least 1, got {trials}")
    kinds = kinds if kinds is not None else gradcheck_kinds()
    results = {}
    for name, make in kinds.items():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for trial in range(trials):
            frag = make(rng)
            x = sample_with_margin(frag.draw, frag.margin_of, margin, rng)
            worst = max(worst, grad_check(frag.fn, frag.params, x, epsilon, seed=trial))
        results[name] = worst
    return results
