"""Parameter counts, per-kind operation counts and energy estimates.

Counting conventions (per output row ``u`` of a layer's unfolded matrix):

conv / binconv
    every MAC reads its activation and its weight; binary weights are packed
    32 per word and multiply-free (sign-controlled add), with one scale
    multiply per output element.
fern
    response: K*m subtractions and tanh; indexing: K*m compares and K*m
    shift-or steps (the register starts at the fern number, so the offset is
    folded in); weight: mode dependent; gather: K*c_out table reads;
    weighted sum: K*c_out multiply-adds.
batch norm
    inference-time affine, 2 multiplies + 1 add per element.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, TableError
from .fern import FernConv, FernEnsembleLayer, WeightMode
from .layers import AdaptiveAvgPool, BatchNorm2d, BinaryConv2d, Conv2d, Flatten, ReLU

OP_KINDS = ("float_mul", "float_add", "float_div", "special_fn", "compare", "int_add_shift",
            "mem_read_words", "mem_write_words")


@dataclass(frozen=True)
class OpCounts:
    float_mul: int = 0
    float_add: int = 0
    float_div: int = 0
    special_fn: int = 0
    compare: int = 0
    int_add_shift: int = 0
    mem_read_words: int = 0
    mem_write_words: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"negative tally for {f.name}")

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{k: getattr(self, k) + getattr(other, k) for k in OP_KINDS})

    def scaled(self, factor: int) -> "OpCounts":
        return OpCounts(**{k: getattr(self, k) * factor for k in OP_KINDS})

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)

    @staticmethod
    def total(parts) -> "OpCounts":
        out = OpCounts()
        for p in parts:
            out = out + p
        return out


# -- parameters ------------------------------------------------------------------

def _layer_params(layer, include_frozen: bool) -> int:
    if isinstance(layer, FernConv):
        cfg = layer.config
        count = cfg.n_cells * cfg.c_out
        if cfg.thresholds_trainable or include_frozen:
            count += cfg.n_ferns * cfg.depth
        return count
    if isinstance(layer, Conv2d):  # BinaryConv2d keeps a latent real weight of the same size
        p = layer.params
        return p.c_out * layer.c_in * p.k * p.k + (p.c_out if p.bias is not None else 0)
    if isinstance(layer, BatchNorm2d):
        return 2 * layer.channels
    return 0


def count_params(model, include_frozen: bool = False) -> int:
    """Closed-form parameter total from layer hyperparameters (no tensor inspection)."""
    if model is None:
        return 0
    return sum(_layer_params(layer, include_frozen) for _, layer in model.layers)


def count_params_bruteforce(model, include_frozen: bool = False) -> int:
    """Sum of sizes of the model's parameter tensors."""
    if model is None:
        return 0
    return sum(t.size for t in model.named_parameters().values()
               if t.requires_grad or include_frozen)


# -- operation counts --------------------------------------------------------------

def _weight_step_counts(m: int, mode: WeightMode) -> OpCounts:
    """Cost of one fern's instance weight from its m responses."""
    if mode is WeightMode.MEAN_L1_PROXIMITY:
        # |c| (sign mask), 1 - |c|, accumulate; then * (1/m) and 1 - .
        return OpCounts(int_add_shift=m, float_add=2 * m + 1, float_mul=1)
    # |c| (sign mask), |c| - 1, square, accumulate; sqrt.
    base = OpCounts(int_add_shift=m, float_add=2 * m, float_mul=m, special_fn=1)
    if mode is WeightMode.NORMALIZED_PROXIMITY:
        base = base + OpCounts(float_mul=1, float_add=1)
    return base


def fern_phase_counts(n_ferns: int, depth: int, c_out: int, mode, rows: int = 1) -> dict:
    """Closed-form op counts per phase of a fern layer over ``rows`` unfolded rows."""
    k, m = n_ferns, depth
    mode = WeightMode.parse(mode)
    phases = {
        "response": OpCounts(float_add=k * m, special_fn=k * m, mem_read_words=2 * k * m),
        "indexing": OpCounts(compare=k * m, int_add_shift=k * m),
        "weight": _weight_step_counts(m, mode).scaled(k),
        "gather": OpCounts(mem_read_words=k * c_out),
        "weighted_sum": OpCounts(float_mul=k * c_out, float_add=k * c_out,
                                 mem_write_words=c_out),
    }
    return {name: c.scaled(rows) for name, c in phases.items()}


def _conv_counts(rows: int, cols: int, c_out: int, binary: bool, bias: bool) -> OpCounts:
    macs = rows * c_out * cols
    writes = rows * c_out
    if binary:
        weight_words = rows * (math.ceil(c_out * cols / 32) + c_out)  # sign bits + scales
        return OpCounts(float_add=macs - writes + (writes if bias else 0), float_mul=writes,
                        mem_read_words=macs + weight_words, mem_write_words=writes)
    return OpCounts(float_mul=macs, float_add=macs - writes + (writes if bias else 0),
                    mem_read_words=2 * macs, mem_write_words=writes)


def layer_op_counts(layer, input_shape: tuple) -> tuple[OpCounts, tuple]:
    """Op counts of one layer on an N x C x H x W input, and its output shape."""
    out_shape = layer.output_shape(input_shape)
    if isinstance(layer, FernConv):
        n, c_out, h, w = out_shape
        cfg = layer.config
        phases = fern_phase_counts(cfg.n_ferns, cfg.depth, cfg.c_out, cfg.weight_mode,
                                   rows=n * h * w)
        return OpCounts.total(phases.values()), out_shape
    if isinstance(layer, Conv2d):
        n, c_out, h, w = out_shape
        p = layer.params
        counts = _conv_counts(n * h * w, layer.c_in * p.k * p.k, c_out,
                              binary=isinstance(layer, BinaryConv2d), bias=p.bias is not None)
        return counts, out_shape
    elements = int(np.prod(input_shape))
    if isinstance(layer, BatchNorm2d):
        return OpCounts(float_mul=2 * elements, float_add=elements, mem_read_words=elements,
                        mem_write_words=elements), out_shape
    if isinstance(layer, ReLU):
        return OpCounts(compare=elements, mem_read_words=elements,
                        mem_write_words=elements), out_shape
    if isinstance(layer, AdaptiveAvgPool):
        n, c = input_shape[:2]
        return OpCounts(float_add=elements, float_mul=n * c, mem_read_words=elements,
                        mem_write_words=n * c), out_shape
    if isinstance(layer, Flatten):
        return OpCounts(), out_shape
    raise TypeError(f"no op-count rule for {type(layer).__name__}")


@dataclass
class OpsReport:
    per_layer: list  # [(name, OpCounts, output_shape)]

    @property
    def total(self) -> OpCounts:
        return OpCounts.total(c for _, c, _ in self.per_layer)


def count_ops(model, input_shape: tuple) -> OpsReport:
    """Per-layer and total op counts; ``input_shape`` is C x H x W or N x C x H x W."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1, *shape)
    rows = []
    for name, layer in model.layers:
        counts, shape = layer_op_counts(layer, shape)
        rows.append((name, counts, shape))
    return OpsReport(rows)


# -- instrumented execution --------------------------------------------------------

class _Tally:
    def __init__(self):
        self.counts = {}

    def add(self, phase: str, **kinds) -> None:
        cur = self.counts.setdefault(phase, dict.fromkeys(OP_KINDS, 0))
        for k, v in kinds.items():
            cur[k] += v

    def result(self) -> dict:
        return {p: OpCounts(**c) for p, c in self.counts.items()}


def instrumented_fern_forward(rows: np.ndarray, layer: FernEnsembleLayer):
    """Scalar-loop fern forward that tallies every primitive it executes, by phase.

    Returns ``(out, phases)``.  Slow; meant for small instances and as an
    independent check of both the kernels and :func:`fern_phase_counts`.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cfg = layer.config
    k_ferns, m, c_out = cfg.n_ferns, cfg.depth, cfg.c_out
    dims = layer.dims
    thr = layer.thresholds.data.astype(np.float64)
    lut = layer.lut.data.astype(np.float64)
    mode = cfg.weight_mode
    tally = _Tally()
    out = np.zeros((rows.shape[0], c_out))
    for u in range(rows.shape[0]):
        acc = [0.0] * c_out
        for k in range(k_ferns):
            cs = []
            for j in range(m):
                x = rows[u, dims[k, j]]
                t = thr[k, j]
                tally.add("response", mem_read_words=2)
                diff = x - t
                tally.add("response", float_add=1)
                cs.append(math.tanh(diff))
                tally.add("response", special_fn=1)
            cell = k
            for j in range(m):
                bit = 1 if cs[j] > 0 else 0
                tally.add("indexing", compare=1)
                cell = (cell << 1) | bit
                tally.add("indexing", int_add_shift=1)
            s = 0.0
            for j in range(m):
                a = abs(cs[j])
                tally.add("weight", int_add_shift=1)
                if mode is WeightMode.MEAN_L1_PROXIMITY:
                    s += 1.0 - a
                    tally.add("weight", float_add=2)
                else:
                    d = a - 1.0
                    s += d * d
                    tally.add("weight", float_add=2, float_mul=1)
            if mode is WeightMode.MEAN_L1_PROXIMITY:
                w = 1.0 - s * (1.0 / m)
                tally.add("weight", float_mul=1, float_add=1)
            else:
                w = math.sqrt(s)
                tally.add("weight", special_fn=1)
                if mode is WeightMode.NORMALIZED_PROXIMITY:
                    w = 1.0 - w * (1.0 / math.sqrt(m))
                    tally.add("weight", float_mul=1, float_add=1)
            row = lut[cell]
            tally.add("gather", mem_read_words=c_out)
            for ch in range(c_out):
                acc[ch] += w * row[ch]
            tally.add("weighted_sum", float_mul=c_out, float_add=c_out)
        out[u] = acc
        tally.add("weighted_sum", mem_write_words=c_out)
    return out, tally.result()


# -- energy ------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyTable:
    """Joules per operation (and per memory word) for each op kind."""

    entries: dict
    name: str = "custom"

    def __post_init__(self):
        for k, v in self.entries.items():
            if k not in OP_KINDS:
                raise TableError(f"unknown op kind {k!r} in energy table")
            if v < 0:
                raise TableError(f"negative energy for {k!r}")

    def __getitem__(self, kind: str) -> float:
        return self.entries[kind]


def parse_energy_table(text: str, name: str = "custom") -> EnergyTable:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[section]`` headers are ignored."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"energy table line {lineno}: expected key = value, got {raw!r}")
        try:
            entries[key.strip()] = float(value)
        except ValueError as exc:
            raise FormatError(f"energy table line {lineno}: bad number {value.strip()!r}") from exc
    return EnergyTable(entries, name)


def default_energy_table_path() -> Path:
    return Path(str(resources.files("fernnet") / "configs" / "energy_default.cfg"))


def load_energy_table(path: Optional[str] = None) -> EnergyTable:
    if path is None or path == "default":
        p = default_energy_table_path()
        return parse_energy_table(p.read_text(encoding="utf-8"), "default")
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read energy table {p}: {exc.strerror}") from exc
    return parse_energy_table(text, p.stem)


def estimate_energy(counts: OpCounts, table: EnergyTable) -> float:
    """Dot product of tallies and per-op energies, in joules."""
    total = 0.0
    for kind in OP_KINDS:
        n = getattr(counts, kind)
        if n == 0:
            continue
        if kind not in table.entries:
            raise TableError(f"energy table {table.name!r} has no entry for {kind!r} "
                             f"(tally {n})")
        total += n * table.entries[kind]
    return total
