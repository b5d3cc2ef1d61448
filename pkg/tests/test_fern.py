import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fernnet.errors import ConfigError, ContractError, DimensionError, GeometryError
from fernnet.fern import (FernConfig, FernConv, WeightMode, fern_backward, fern_conv_layer,
                          fern_forward, fern_init, fern_response, index_encode, instance_weight)
from fernnet.spatial import fold, unfold
from fernnet.tensor import Tape, Tensor
from fernnet.train import grad_check, sample_with_margin

from oracles import fern_loops

MODES = [m.value for m in WeightMode]

# tanh evaluated independently (mpmath-free, 20 digits from a series table).
TANH_HALF, TANH_MINUS_ONE, TANH_TWO = 0.46211715726000974, -0.7615941559557649, 0.9640275800758169


def _layer(k=4, m=3, in_dim=10, c_out=5, mode="literal_l2", seed=0, dtype="f64"):
    return fern_init(FernConfig(k, m, in_dim, c_out, mode, seed=seed, dtype=dtype))


# -- init --------------------------------------------------------------------------

def test_init_shapes_and_offsets():
    layer = fern_init(FernConfig(24, 3, 75, 64, seed=7))
    assert layer.lut.shape == (192, 64)
    assert layer.offsets.tolist() == list(range(0, 192, 8))
    assert layer.dims.min() >= 0 and layer.dims.max() < 75


def test_init_single_dimension_is_forced():
    assert fern_init(FernConfig(1, 1, 1, 1)).dims.tolist() == [[0]]


def test_init_is_deterministic():
    a, b = _layer(seed=9), _layer(seed=9)
    assert np.array_equal(a.dims, b.dims)
    assert a.thresholds.data.tobytes() == b.thresholds.data.tobytes()
    assert a.lut.data.tobytes() == b.lut.data.tobytes()


def test_lut_scale_follows_fern_count():
    layer = fern_init(FernConfig(64, 4, 10, 64, seed=0))
    assert abs(layer.lut.data.std() - 1 / 8) < 0.01
    assert abs(layer.thresholds.data.std() - 1) < 0.1


@pytest.mark.parametrize("kwargs", [dict(n_ferns=0), dict(depth=0), dict(depth=25),
                                    dict(in_dim=0), dict(c_out=0), dict(weight_mode="l3"),
                                    dict(dtype="f16")])
def test_config_bounds(kwargs):
    base = dict(n_ferns=2, depth=3, in_dim=4, c_out=2)
    base.update(kwargs)
    with pytest.raises((ConfigError, ContractError)):
        FernConfig(**base)


def test_frozen_thresholds_do_not_require_grad():
    layer = fern_init(FernConfig(2, 3, 4, 2, thresholds_trainable=False))
    assert not layer.thresholds.requires_grad and layer.lut.requires_grad


# -- response, index, weight -------------------------------------------------------

def test_response_values():
    layer = _layer(k=1, m=3, in_dim=3)
    layer.dims[:] = [[0, 1, 2]]
    layer.thresholds.data[:] = 0
    c = fern_response(np.array([0.5, -1.0, 2.0]), layer)
    np.testing.assert_allclose(c[0], [TANH_HALF, TANH_MINUS_ONE, TANH_TWO], rtol=1e-14)


def test_response_zero_at_thresholds_and_saturates():
    layer = _layer(k=2, m=3, in_dim=6, dtype="f32")
    layer.dims[:] = [[0, 1, 2], [3, 4, 5]]
    row = np.zeros(6, dtype=np.float32)
    row[layer.dims] = layer.thresholds.data
    assert np.all(fern_response(row, layer) == 0)
    layer.thresholds.data[:] = 0
    assert np.all(fern_response(np.full(6, 100, dtype=np.float32), layer) == 1.0)


def test_response_rejects_wrong_length():
    with pytest.raises(DimensionError):
        fern_response(np.zeros(3), _layer())


def test_index_examples():
    layer = _layer(k=3, m=3)
    c = np.array([[-0.1, -0.5, -0.9], [0.3, 0.2, 0.1], [0.9, -0.2, 0.1]])
    assert index_encode(c, layer).tolist() == [0, 8 + 7, 16 + 5]


def test_index_zero_maps_to_bit_zero():
    layer = _layer(k=1, m=2)
    assert index_encode(np.array([[0.0, 0.0]]), layer).tolist() == [0]


@pytest.mark.parametrize("c,expected", [
    ((1, -1, 1), {"literal_l2": 0.0, "normalized_proximity": 1.0, "mean_l1": 1.0}),
    ((0, 0, 0), {"literal_l2": math.sqrt(3), "normalized_proximity": 0.0, "mean_l1": 0.0}),
    ((0.5, -0.5, 1), {"literal_l2": math.sqrt(0.5)}),
])
def test_instance_weight_examples(c, expected):
    for mode, value in expected.items():
        assert instance_weight(np.array(c, dtype=float), mode) == pytest.approx(value, abs=1e-15)


def test_instance_weight_unknown_mode():
    with pytest.raises(ConfigError):
        instance_weight(np.zeros(3), "cosine")


# -- forward -----------------------------------------------------------------------

def test_single_fern_hand_example(backend):
    layer = _layer(k=1, m=1, in_dim=1, c_out=2)
    layer.thresholds.data[:] = 0
    out, ctx = fern_forward(np.array([[0.5]]), layer)
    assert ctx.indices.tolist() == [[1]]
    assert ctx.weights[0, 0] == pytest.approx(1 - TANH_HALF, abs=1e-15)
    assert ctx.weights[0, 0] == pytest.approx(0.53788, abs=5e-6)
    np.testing.assert_allclose(out.data[0], (1 - TANH_HALF) * layer.lut.data[1], rtol=1e-14)


@pytest.mark.parametrize("mode", MODES)
def test_forward_matches_loop_oracle(backend, mode):
    rng = np.random.default_rng(42)
    for _ in range(20):
        k, m, r, c_out = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 65), \
            rng.integers(1, 17)
        in_dim = int(rng.integers(1, 20))
        layer = _layer(int(k), int(m), in_dim, int(c_out), mode, seed=int(rng.integers(1 << 30)))
        rows = rng.standard_normal((int(r), in_dim))
        out, ctx = fern_forward(rows, layer)
        ref, ref_idx, scale = fern_loops(rows, layer.dims, layer.thresholds.data,
                                         layer.lut.data, mode)
        assert np.array_equal(ctx.indices, ref_idx)
        assert (np.abs(out.data - ref) / np.maximum(scale, 1e-300)).max() <= 1e-12


def test_saturated_literal_fern_outputs_exactly_zero(backend):
    layer = _layer(k=3, m=3, in_dim=4, mode="literal_l2")
    layer.thresholds.data[:] = 0
    rows = np.array([[50.0, -50.0, 60.0, -70.0]])
    out, ctx = fern_forward(rows, layer)
    assert np.all(np.abs(ctx.c) == 1.0)
    assert np.all(out.data == 0.0)


def test_identical_rows_give_identical_outputs(backend):
    layer = _layer()
    row = np.random.default_rng(0).standard_normal(10)
    out, _ = fern_forward(np.stack([row, row]), layer)
    assert np.array_equal(out.data[0], out.data[1])


def test_index_range_and_coverage(backend):
    layer = _layer(k=6, m=3, in_dim=8)
    rows = np.random.default_rng(5).standard_normal((2000, 8)) * 2
    _, ctx = fern_forward(rows, layer)
    lo, hi = layer.offsets, layer.offsets + 8
    assert np.all((ctx.indices >= lo) & (ctx.indices < hi))
    assert any(len(np.unique(ctx.indices[:, k])) == 8 for k in range(6))


def test_forward_rejects_wrong_width():
    with pytest.raises(DimensionError):
        fern_forward(np.zeros((3, 9)), _layer())


def test_forward_rejects_dtype_mismatch():
    with pytest.raises(ContractError):
        fern_forward(Tensor(np.zeros((3, 10)), dtype="f32"), _layer(dtype="f64"))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), r=st.integers(1, 20))
def test_permuting_rows_permutes_outputs(seed, r):
    rng = np.random.default_rng(seed)
    layer = _layer(seed=seed)
    rows = rng.standard_normal((r, 10))
    perm = rng.permutation(r)
    out, _ = fern_forward(rows, layer)
    out_perm, _ = fern_forward(rows[perm], layer)
    assert np.array_equal(out_perm.data, out.data[perm])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), mode=st.sampled_from(MODES))
def test_doubling_the_table_doubles_the_output(seed, mode):
    layer = _layer(mode=mode, seed=seed)
    rows = np.random.default_rng(seed).standard_normal((7, 10))
    out, _ = fern_forward(rows, layer)
    layer.lut.data *= 2
    out2, _ = fern_forward(rows, layer)
    assert np.array_equal(out2.data, 2 * out.data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_output_is_continuous_inside_a_sign_region(seed):
    rng = np.random.default_rng(seed)
    layer = _layer(mode="normalized_proximity", seed=seed)
    rows = rng.standard_normal((4, 10))
    _, ctx = fern_forward(rows, layer)
    if np.abs(ctx.c).min() < 1e-3:
        return
    out, _ = fern_forward(rows, layer)
    moved, ctx2 = fern_forward(rows + 1e-7, layer)
    assert np.array_equal(ctx.indices, ctx2.indices)
    assert np.abs(moved.data - out.data).max() < 1e-5


# -- backward ----------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients(backend):
    layer = _layer()
    _, ctx = fern_forward(np.random.default_rng(0).standard_normal((5, 10)), layer)
    for g in fern_backward(ctx, np.zeros((5, 5)), layer):
        assert not g.any()


def test_single_row_table_gradient_is_local(backend):
    layer = _layer(k=1, m=3, in_dim=4, c_out=3)
    _, ctx = fern_forward(np.random.default_rng(1).standard_normal((1, 4)), layer)
    g = np.array([[1.0, -2.0, 0.5]])
    grad_lut, _, _ = fern_backward(ctx, g, layer)
    i = ctx.indices[0, 0]
    np.testing.assert_allclose(grad_lut[i], ctx.weights[0, 0] * g[0])
    assert not np.delete(grad_lut, i, axis=0).any()


def test_backward_shape_and_context_contracts():
    layer, other = _layer(), _layer(seed=1)
    _, ctx = fern_forward(np.zeros((2, 10)), layer)
    with pytest.raises(ContractError):
        fern_backward(ctx, np.zeros((3, 5)), layer)
    with pytest.raises(ContractError):
        fern_backward(ctx, np.zeros((2, 5)), other)


@pytest.mark.parametrize("mode", MODES)
def test_layer_gradient_matches_finite_differences(backend, mode):
    rng = np.random.default_rng(7)
    for trial in range(5):
        conv = FernConv(FernConfig(3, 3, 2 * 9, 4, mode, seed=trial, dtype="f64"), k=3,
                        stride=2, padding=1)
        x = sample_with_margin(lambda r: r.standard_normal((2, 2, 5, 5)), conv.min_margin,
                               1e-3, rng)
        err = grad_check(lambda t: conv(t, True),
                         [conv.layer.thresholds, conv.layer.lut], x, seed=trial)
        assert err < 1e-5


def test_gradient_does_not_flow_into_frozen_thresholds():
    conv = FernConv(FernConfig(2, 2, 4, 2, thresholds_trainable=False, dtype="f64"), k=2)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)), dtype="f64")
    with Tape() as tape:
        loss = conv(x, True).sum()
    tape.backward(loss)
    assert conv.layer.thresholds.grad is None and conv.layer.lut.grad is not None


# -- conv drop-in ------------------------------------------------------------------

def test_conv_layer_shape():
    layer = fern_init(FernConfig(24, 3, 75, 64))
    out = fern_conv_layer(Tensor(np.zeros((1, 3, 32, 32)), dtype="f32"), layer, 5, 2, 2)
    assert out.shape == (1, 64, 16, 16)


def test_conv_layer_is_unfold_forward_fold():
    layer = _layer(in_dim=2 * 4, c_out=3)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 2, 5, 5)), dtype="f64")
    ufm = unfold(x, 2, 1, 0)
    rows, _ = fern_forward(ufm, layer)
    assert np.array_equal(fern_conv_layer(x, layer, 2).data, fold(rows, ufm.geometry).data)


def test_conv_layer_geometry_error():
    with pytest.raises(GeometryError):
        fern_conv_layer(Tensor(np.zeros((1, 3, 8, 8))), _layer(in_dim=10), 3)
