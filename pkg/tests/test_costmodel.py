import numpy as np
import pytest

from fernnet.config import LayerSpec, ModelConfig, reference_architecture
from fernnet.costmodel import (OP_KINDS, EnergyTable, OpCounts, count_ops, count_params,
                               count_params_bruteforce, estimate_energy, fern_phase_counts,
                               instrumented_fern_forward, layer_op_counts, load_energy_table,
                               parse_energy_table)
from fernnet.errors import FormatError, TableError
from fernnet.fern import FernConfig, FernConv, WeightMode, fern_forward, fern_init
from fernnet.layers import Conv2d, Module
from fernnet.train import build_model

MODES = [m.value for m in WeightMode]


def _closed_form_fern(k=24, m=3, trainable=True):
    """Parameter total of the five-stage fern net, written out by hand."""
    luts = 3 * (k * 2 ** m * 64) + k * 2 ** m * 2
    bn = 3 * 2 * 64
    thresholds = 4 * k * m if trainable else 0
    return luts + bn + thresholds


def test_fern_param_count():
    assert _closed_form_fern() == 37_920
    assert count_params(build_model(reference_architecture("fern"))) == 37_920
    frozen = build_model(reference_architecture("fern", thresholds_trainable=False))
    assert count_params(frozen) == 37_632
    assert count_params(frozen, include_frozen=True) == 37_920


def test_conv_param_count():
    vanilla = (3 * 64 * 25 + 64) + 2 * (64 * 64 * 9 + 64) + 3 * 2 * 64 + (64 * 2 + 2)
    assert vanilla == 79_234
    assert count_params(build_model(reference_architecture("conv"))) == vanilla
    assert count_params(build_model(reference_architecture("binconv"))) == vanilla


@pytest.mark.parametrize("backbone", ["fern", "conv", "binconv"])
@pytest.mark.parametrize("frozen", [False, True])
def test_closed_form_matches_bruteforce(backbone, frozen):
    model = build_model(reference_architecture(backbone, thresholds_trainable=not frozen))
    for include in (False, True):
        assert count_params(model, include) == count_params_bruteforce(model, include)


def test_empty_model_has_no_params():
    assert count_params(None) == 0 == count_params_bruteforce(None)


# -- op counts ---------------------------------------------------------------------

def test_opcounts_arithmetic():
    a, b = OpCounts(float_mul=2, compare=1), OpCounts(float_mul=3, mem_read_words=4)
    assert (a + b).as_dict() == {**dict.fromkeys(OP_KINDS, 0), "float_mul": 5, "compare": 1,
                                 "mem_read_words": 4}
    assert a.scaled(3).float_mul == 6
    with pytest.raises(ValueError):
        OpCounts(float_add=-1)


@pytest.mark.parametrize("backbone", ["fern", "conv", "binconv"])
def test_counts_are_additive(backbone):
    report = count_ops(build_model(reference_architecture(backbone)), (3, 64, 64))
    total = OpCounts()
    for _, counts, _ in report.per_layer:
        total = total + counts
    assert total == report.total


def test_unit_conv_has_one_multiply():
    conv = Conv2d(1, 1, 1, bias=False)
    counts, shape = layer_op_counts(conv, (1, 1, 1, 1))
    assert counts.float_mul == 1 and shape == (1, 1, 1, 1)


def test_indexing_has_no_float_multiplications():
    for mode in MODES:
        for k, m in [(1, 1), (24, 3), (8, 12)]:
            phases = fern_phase_counts(k, m, 64, mode, rows=100)
            assert phases["indexing"].float_mul == 0
            assert phases["indexing"].compare == k * m * 100


def test_layer_two_multiplication_ratio():
    cfg = reference_architecture("fern")
    fern = build_model(cfg).layers[2][1]
    conv = build_model(reference_architecture("conv")).layers[3][1]
    f_counts, f_shape = layer_op_counts(fern, (1, 64, 16, 16))
    c_counts, _ = layer_op_counts(conv, (1, 64, 16, 16))
    elements = int(np.prod(f_shape))
    ratio = (f_counts.float_mul / elements) / (c_counts.float_mul / elements)
    assert f_counts.float_mul / elements == pytest.approx(24 * 67 / 64)
    assert ratio == pytest.approx(24 * 67 / 64 / 576) and ratio == pytest.approx(0.0436, abs=1e-4)


@pytest.mark.parametrize("mode", MODES)
def test_instrumented_forward_agrees_with_closed_form_and_kernels(mode):
    layer = fern_init(FernConfig(5, 3, 12, 4, mode, seed=3, dtype="f64"))
    rows = np.random.default_rng(0).standard_normal((7, 12))
    out, phases = instrumented_fern_forward(rows, layer)
    assert phases == fern_phase_counts(5, 3, 4, mode, rows=7)
    assert phases["indexing"].float_mul == 0
    ref, _ = fern_forward(rows, layer)
    np.testing.assert_allclose(out, ref.data, rtol=1e-12, atol=1e-15)


# -- energy ------------------------------------------------------------------------

def test_energy_definitions():
    table = EnergyTable({"float_mul": 3.7e-12})
    assert estimate_energy(OpCounts(), table) == 0.0
    assert estimate_energy(OpCounts(float_mul=1), table) == 3.7e-12
    with pytest.raises(TableError):
        estimate_energy(OpCounts(float_add=1), table)


def test_default_table_covers_every_kind():
    table = load_energy_table("default")
    assert set(table.entries) == set(OP_KINDS)
    assert table["float_mul"] > table["float_add"] > table["int_add_shift"]


def test_energy_ordering_at_64():
    table = load_energy_table()
    energy = {b: estimate_energy(count_ops(build_model(reference_architecture(b)), (3, 64, 64)).total,
                                 table) for b in ("fern", "conv", "binconv")}
    assert energy["fern"] < energy["binconv"] < energy["conv"]


def test_table_parsing_errors(tmp_path):
    with pytest.raises(FormatError):
        parse_energy_table("float_mul 3")
    with pytest.raises(FormatError):
        parse_energy_table("float_mul = lots")
    with pytest.raises(TableError):
        parse_energy_table("teleport = 1")
    with pytest.raises(TableError):
        parse_energy_table("float_mul = -1")
    with pytest.raises(FormatError):
        load_energy_table(str(tmp_path / "missing.cfg"))
    path = tmp_path / "mine.cfg"
    path.write_text("[ops]\nfloat_mul = 2  # comment\n")
    table = load_energy_table(str(path))
    assert table.name == "mine" and table.entries == {"float_mul": 2.0}


def test_unknown_layer_type():
    with pytest.raises(TypeError):
        layer_op_counts(Module(), (1, 1, 1, 1))
