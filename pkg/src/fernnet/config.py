"""Model and training configuration plus their key = value text form.

Config files are INI-style (read with :mod:`configparser`)::

    [model]
    backbone = fern
    seed = 0
    dtype = f32
    input_shape = 3, 64, 64

    [fern]
    n_ferns = 24
    depth = 3
    weight_mode = literal_l2
    thresholds_trainable = true

    [layers]
    # c_in, c_out, kernel, stride, padding, norm[, backbone]
    1 = 3, 64, 5, 2, 2, bn
    2 = 64, 64, 3, 2, 1, bn
    3 = 64, 64, 3, 2, 1, bn
    4 = pool
    5 = 64, 2, 1, 1, 0, none

    [train]
    optimizer = adam
    lr = 0.001
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .fern import WeightMode

BACKBONES = ("fern", "conv", "binconv")
NORMS = ("bn", "none")
BUILTIN_CONFIGS = ("fern", "conv", "binconv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "block" or "pool"
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    norm: str = "none"
    backbone: Optional[str] = None  # None: use the model-wide backbone

    def to_text(self) -> str:
        if self.kind == "pool":
            return "pool"
        parts = [self.c_in, self.c_out, self.kernel, self.stride, self.padding, self.norm]
        if self.backbone is not None:
            parts.append(self.backbone)
        return ", ".join(str(p) for p in parts)

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        parts = [p.strip() for p in text.split(",")]
        if parts == ["pool"]:
            return cls("pool")
        if len(parts) not in (6, 7):
            raise ConfigError(f"layer spec needs c_in, c_out, kernel, stride, padding, norm"
                              f"[, backbone]; got {text!r}")
        try:
            nums = [int(p) for p in parts[:5]]
        except ValueError as exc:
            raise ConfigError(f"non-integer geometry in layer spec {text!r}") from exc
        norm = parts[5].lower()
        if norm in ("-", ""):
            norm = "none"
        backbone = parts[6].lower() if len(parts) == 7 else None
        return cls("block", *nums, norm=norm, backbone=backbone)


@dataclass(frozen=True)
class FernSettings:
    n_ferns: int = 24
    depth: int = 3
    weight_mode: WeightMode = WeightMode.LITERAL_L2
    thresholds_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode.parse(self.weight_mode))


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    backbone: str = "fern"
    fern: FernSettings = field(default_factory=FernSettings)
    seed: int = 0
    dtype: str = "f32"
    input_shape: tuple = (3, 64, 64)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def layer_backbone(self, spec: LayerSpec) -> str:
        return spec.backbone or self.backbone

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be C, H, W; got {self.input_shape}")
        channels = self.input_shape[0]
        for i, spec in enumerate(self.layers, 1):
            if spec.kind == "pool":
                continue
            if spec.kind != "block":
                raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
            if self.layer_backbone(spec) not in BACKBONES:
                raise ConfigError(f"layer {i}: unknown backbone {spec.backbone!r}")
            if spec.norm not in NORMS:
                raise ConfigError(f"layer {i}: unknown norm {spec.norm!r}")
            if min(spec.c_in, spec.c_out, spec.kernel, spec.stride) < 1 or spec.padding < 0:
                raise ConfigError(f"layer {i}: invalid geometry {spec.to_text()}")
            if spec.c_in != channels:
                raise ConfigError(f"layer {i}: c_in {spec.c_in} does not chain with the "
                                  f"previous {channels} channels")
            channels = spec.c_out

    def replace(self, **changes) -> "ModelConfig":
        fern_changes = {k: changes.pop(k) for k in list(changes)
                        if k in ("n_ferns", "depth", "weight_mode", "thresholds_trainable")}
        if fern_changes:
            changes["fern"] = dataclasses.replace(self.fern, **fern_changes)
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"invalid batch_size={self.batch_size} / epochs={self.epochs}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def reference_architecture(backbone: str = "fern", **overrides) -> ModelConfig:
    """The 5-stage network: three strided blocks with BN, global pooling, 1x1 classifier."""
    layers = (
        LayerSpec("block", 3, 64, 5, 2, 2, "bn"),
        LayerSpec("block", 64, 64, 3, 2, 1, "bn"),
        LayerSpec("block", 64, 64, 3, 2, 1, "bn"),
        LayerSpec("pool"),
        LayerSpec("block", 64, 2, 1, 1, 0, "none"),
    )
    return ModelConfig(layers=layers, backbone=backbone).replace(**overrides)


# -- text form -----------------------------------------------------------------

def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def to_text(model: ModelConfig, train: Optional[TrainConfig] = None) -> str:
    """Canonical text form; identical configs always give identical text."""
    lines = ["[model]", f"backbone = {model.backbone}", f"seed = {model.seed}",
             f"dtype = {model.dtype}", "input_shape = " + ", ".join(map(str, model.input_shape)),
             f"bn_momentum = {model.bn_momentum!r}", f"bn_epsilon = {model.bn_epsilon!r}", "",
             "[fern]", f"n_ferns = {model.fern.n_ferns}", f"depth = {model.fern.depth}",
             f"weight_mode = {model.fern.weight_mode.value}",
             f"thresholds_trainable = {str(model.fern.thresholds_trainable).lower()}", "",
             "[layers]"]
    lines += [f"{i} = {spec.to_text()}" for i, spec in enumerate(model.layers, 1)]
    if train is not None:
        lines += ["", "[train]"]
        lines += [f"{f.name} = {getattr(train, f.name)!r}".replace("'", "")
                  for f in dataclasses.fields(train)]
    return "\n".join(lines) + "\n"


def from_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    if not parser.has_section("layers"):
        raise ConfigError("config has no [layers] section")
    try:
        m = parser["model"] if parser.has_section("model") else {}
        f = parser["fern"] if parser.has_section("fern") else {}
        fern = FernSettings(
            n_ferns=int(f.get("n_ferns", 24)), depth=int(f.get("depth", 3)),
            weight_mode=f.get("weight_mode", "literal_l2"),
            thresholds_trainable=_bool(f.get("thresholds_trainable", "true")))
        layer_items = sorted(parser["layers"].items(), key=lambda kv: int(kv[0]))
        layers = tuple(LayerSpec.from_text(v) for _, v in layer_items)
        model = ModelConfig(
            layers=layers, backbone=m.get("backbone", "fern").strip().lower(), fern=fern,
            seed=int(m.get("seed", 0)), dtype=m.get("dtype", "f32").strip(),
            input_shape=tuple(int(v) for v in m.get("input_shape", "3, 64, 64").split(",")),
            bn_momentum=float(m.get("bn_momentum", 0.1)),
            bn_epsilon=float(m.get("bn_epsilon", 1e-5)))
        train = TrainConfig()
        if parser.has_section("train"):
            t = parser["train"]
            kinds = {fl.name: fl.type for fl in dataclasses.fields(TrainConfig)}
            values = {}
            for key, raw in t.items():
                if key not in kinds:
                    raise ConfigError(f"unknown [train] key {key!r}")
                caster = {"str": str, "float": float, "int": int}[kinds[key]]
                values[key] = caster(raw.strip().lower() if caster is str else raw)
            train = TrainConfig(**values)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    return model, train


def builtin_config_path(name: str) -> Path:
    return Path(str(resources.files("fernnet") / "configs" / f"{name}.cfg"))


def load_config(path_or_name) -> tuple[ModelConfig, TrainConfig]:
    """Read a config file; the bare names ``fern``, ``conv``, ``binconv`` load the shipped ones."""
    if str(path_or_name) in BUILTIN_CONFIGS and not Path(str(path_or_name)).exists():
        path = builtin_config_path(str(path_or_name))
    else:
        path = Path(path_or_name)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return from_text(text)
