import math

import numpy as np
import pytest

from fernnet.config import LayerSpec, ModelConfig, TrainConfig, reference_architecture
from fernnet.costmodel import count_params
from fernnet.errors import ConfigError, ContractError, DataError, SamplingError
from fernnet.layers import Module
from fernnet.tensor import Tape, Tensor, record_op
from fernnet.train import (Dataset, DivergenceError, Model, build_model, evaluate,
                           fern_fragment, grad_check, optimizer_step, relative_error,
                           run_gradcheck, sample_with_margin, softmax_cross_entropy,
                           train_epochs)

from oracles import central_difference

BACKBONES = ("fern", "conv", "binconv")


def _small_config(backbone, **kw):
    """The same five-stage layout on 16 x 16 inputs with narrow blocks."""
    layers = (LayerSpec("block", 3, 8, 5, 2, 2, "bn"), LayerSpec("block", 8, 8, 3, 2, 1, "bn"),
              LayerSpec("pool"), LayerSpec("block", 8, 2, 1, 1, 0, "none"))
    cfg = ModelConfig(layers=layers, backbone=backbone, input_shape=(3, 16, 16))
    return cfg.replace(n_ferns=8, **kw)


# -- model assembly ----------------------------------------------------------------

@pytest.mark.parametrize("backbone", BACKBONES)
def test_logit_shape(backbone):
    model = build_model(reference_architecture(backbone))
    out = model(np.zeros((2, 3, 64, 64), dtype=np.float32))
    assert out.shape == (2, 2)


def test_parameter_totals():
    assert count_params(build_model(reference_architecture("fern"))) == 37_920
    assert count_params(build_model(reference_architecture("fern", thresholds_trainable=False))) \
        == 37_632
    assert count_params(build_model(reference_architecture("conv"))) == 79_234


def test_relu_only_for_conv_backbones():
    kinds = lambda b: [layer.kind for _, layer in build_model(reference_architecture(b)).layers]
    assert "relu" not in kinds("fern")
    assert kinds("conv").count("relu") == 3 and kinds("binconv").count("relu") == 3


def test_channel_chaining_is_checked():
    layers = (LayerSpec("block", 3, 8, 3, 1, 1, "bn"), LayerSpec("block", 4, 2, 1, 1, 0, "none"))
    with pytest.raises(ConfigError, match="chain"):
        ModelConfig(layers=layers)


def test_per_layer_backbone_override():
    layers = (LayerSpec("block", 3, 4, 3, 1, 1, "bn", "conv"), LayerSpec("pool"),
              LayerSpec("block", 4, 2, 1, 1, 0, "none"))
    model = build_model(ModelConfig(layers=layers, backbone="fern"))
    assert [layer.kind for _, layer in model.layers] == \
        ["conv", "bn", "relu", "pool", "fern", "flatten"]


def test_state_dict_round_trip_and_mismatch():
    a, b = build_model(_small_config("fern", seed=1)), build_model(_small_config("fern", seed=2))
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(ContractError, match="missing"):
        b.load_state_dict(state)


# -- loss --------------------------------------------------------------------------

def test_cross_entropy_values():
    assert softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))
    assert softmax_cross_entropy(Tensor([[100.0, 0.0]], dtype="f64"), [0]).item() < 1e-40


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = np.random.default_rng(0).standard_normal((4, 2))
    labels = np.array([0, 1, 1, 0])
    x = Tensor(logits.copy(), requires_grad=True, dtype="f64")
    with Tape() as tape:
        loss = softmax_cross_entropy(x, labels)
    tape.backward(loss)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = (p - np.eye(2)[labels]) / 4
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)
    numeric = central_difference(
        lambda: softmax_cross_entropy(Tensor(logits, dtype="f64"), labels).item(), logits)
    np.testing.assert_allclose(x.grad, numeric, atol=1e-9)


@pytest.mark.parametrize("labels", [[0, 2], [-1, 0], [0]])
def test_cross_entropy_label_errors(labels):
    with pytest.raises(DataError):
        softmax_cross_entropy(Tensor(np.zeros((2, 2))), labels)


# -- optimizers --------------------------------------------------------------------

def test_sgd_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    optimizer_step([p], [np.array([1.0])], {}, TrainConfig(optimizer="sgd", lr=0.1, momentum=0))
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optimizer_step([p], [np.zeros(2)], {}, TrainConfig(optimizer="sgd", lr=0.1, momentum=0))
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state, cfg = {}, TrainConfig(optimizer="sgd", lr=1.0, momentum=0.5)
    optimizer_step([p], [np.array([1.0])], state, cfg)
    optimizer_step([p], [np.array([1.0])], state, cfg)
    assert p.data[0] == pytest.approx(-(1.0 + 1.5))


@pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
def test_adam_first_step_is_lr_sized(scale):
    p = Tensor(np.array([0.0]), requires_grad=True, dtype="f64")
    optimizer_step([p], [np.array([scale])], {}, TrainConfig(lr=1e-3))
    assert abs(p.data[0]) == pytest.approx(1e-3, rel=1e-3)


def test_invalid_train_config():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")


# -- loops -------------------------------------------------------------------------

class _Constant(Module):
    def forward(self, x, training=False):
        return Tensor(np.tile([1.0, 0.0], (x.shape[0], 1)), dtype=x.dtype)


def test_constant_model_accuracy_is_label_zero_fraction():
    labels = np.array([0, 1, 1, 0, 0])
    ds = Dataset(np.zeros((5, 1, 2, 2), dtype=np.float32), labels)
    assert evaluate(Model([("c", _Constant())]), ds) == pytest.approx(3 / 5)


def test_empty_dataset_is_rejected():
    empty = Dataset(np.zeros((0, 3, 16, 16), dtype=np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(DataError):
        evaluate(build_model(_small_config("conv")), empty)
    with pytest.raises(DataError):
        train_epochs(build_model(_small_config("conv")), empty, TrainConfig(epochs=1))


def test_inconsistent_dataset():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2))


def _toy(n, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    labels = np.full(n, constant) if constant is not None else np.arange(n) % 2
    images = rng.standard_normal((n, 3, 16, 16)).astype(np.float32) * 0.3
    images += np.where(labels == 1, 1.0, -1.0)[:, None, None, None].astype(np.float32)
    return Dataset(images, labels.astype(np.int64))


def test_one_epoch_on_separable_toy_reduces_loss():
    ds = _toy(4)
    model = build_model(_small_config("conv"))
    from fernnet.train import evaluate_loss
    before = evaluate_loss(model, ds)
    train_epochs(model, ds, TrainConfig(epochs=1, batch_size=4, lr=1e-2))
    assert evaluate_loss(model, ds) < before


@pytest.mark.parametrize("backbone", BACKBONES)
def test_constant_labels_drive_loss_to_zero(backbone):
    ds = _toy(32, constant=1)
    model = build_model(_small_config(backbone, weight_mode="normalized_proximity"))
    history = train_epochs(model, ds, TrainConfig(epochs=15, batch_size=8, lr=1e-2))
    assert history[-1].train_loss < 0.05 < history[0].train_loss


def test_table_receives_gradient():
    model = build_model(_small_config("fern"))
    x = Tensor(_toy(4).images)
    with Tape() as tape:
        loss = softmax_cross_entropy(model(x, training=True), [0, 1, 0, 1])
    tape.backward(loss)
    for name, t in model.named_parameters().items():
        if name.endswith("lut"):
            assert t.grad is not None and np.abs(t.grad).sum() > 0


def test_seeded_training_is_repeatable():
    def run():
        model = build_model(_small_config("fern", seed=3))
        hist = train_epochs(model, _toy(16), TrainConfig(epochs=2, batch_size=4, seed=5))
        return [(h.train_loss, h.test_accuracy) for h in hist], model.state_dict()

    (h1, s1), (h2, s2) = run(), run()
    assert h1 == h2
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)


def test_early_stop_predicate():
    hist = train_epochs(build_model(_small_config("conv")), _toy(8),
                        TrainConfig(epochs=5, batch_size=4), stop=lambda h: len(h) == 2)
    assert len(hist) == 2


def test_divergence_is_reported():
    ds = _toy(4)
    ds.images[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_epochs(build_model(_small_config("fern")), ds, TrainConfig(epochs=1, batch_size=4))


# -- gradient checking harness -----------------------------------------------------

def test_relative_error_definition():
    assert relative_error(np.array([2.0]), np.array([1.0])) == 1.0
    assert relative_error(np.array([1e-3]), np.array([0.0])) == 1e-3
    assert relative_error(np.array([]), np.array([])) == 0.0


def test_corrupted_backward_is_detected():
    def doubled_square(x):
        return record_op(x.data ** 2, (x,), lambda g: (g * 2 * x.data * 2,))

    x = np.random.default_rng(0).uniform(0.5, 1.5, size=(3,))
    err = grad_check(doubled_square, [], x)
    assert err == pytest.approx(1.0, abs=0.35)


def test_fern_fragment_passes():
    frag = fern_fragment(np.random.default_rng(0), "literal_l2")
    x = sample_with_margin(frag.draw, frag.margin_of, 1e-3, np.random.default_rng(1))
    assert frag.margin_of(x) >= 1e-3
    assert grad_check(frag.fn, frag.params, x) < 1e-5


def test_grad_check_requires_f64():
    frag = fern_fragment(np.random.default_rng(0), "literal_l2")
    with pytest.raises(ContractError):
        grad_check(frag.fn, frag.params, Tensor(np.zeros((2, 2, 4, 4)), dtype="f32"))


def test_sampling_gives_up():
    with pytest.raises(SamplingError):
        sample_with_margin(lambda r: r.standard_normal(3), lambda x: 0.0, 1e-3,
                           np.random.default_rng(0), max_draws=5)


def test_run_gradcheck_small():
    results = run_gradcheck(trials=2)
    assert set(results) == {"fern[literal_l2]", "fern[normalized_proximity]", "fern[mean_l1]",
                            "conv", "batchnorm", "loss"}
    assert all(v < 1e-5 for v in results.values())
    with pytest.raises(ContractError):
        run_gradcheck(trials=0)
