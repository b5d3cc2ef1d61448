"""Binary checkpoint and dataset formats, IDX import and the synthetic texture task.

All binary formats are little-endian with fixed-width fields.

Checkpoint::

    b"FERN" | u32 version | u32 n_entries
    n_entries x ( u32 name_len | name utf-8 | u8 dtype | u32 rank | rank x u64 extent | raw values )
    u64 config_len | config text utf-8

    dtype codes: 0 = f32, 1 = f64, 2 = i64

Dataset::

    b"FDS1" | u32 N | u32 C | u32 H | u32 W | N x u8 label | N*C*H*W x f32 (sample-major)
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, TrainConfig, from_text, to_text
from .errors import DataError, FormatError, VersionError
from .train import Dataset, Model, build_model

CHECKPOINT_MAGIC = b"FERN"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"FDS1"

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def atomic_write(path, payload: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


# -- checkpoints -------------------------------------------------------------------

def encode_checkpoint(tensors: dict[str, np.ndarray], config_text: str) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"cannot store {name!r} with dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    raw_cfg = config_text.encode("utf-8")
    parts.append(struct.pack("<Q", len(raw_cfg)) + raw_cfg)
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(payload, "checkpoint")
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a fernnet checkpoint (bad magic)")
    version, count = r.unpack("II")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported "
                           f"(expected {CHECKPOINT_VERSION})")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint entry name is not UTF-8") from exc
        code, rank = r.unpack("BI")
        if code not in _CODE_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        if rank > 32:
            raise FormatError(f"entry {name!r}: implausible rank {rank}")
        shape = r.unpack(f"{rank}Q")
        dt = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(shape).astype(
            dt.newbyteorder("="))
    (cfg_len,) = r.unpack("Q")
    try:
        text = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("embedded config is not UTF-8") from exc
    if r.pos != len(payload):
        raise FormatError(f"checkpoint has {len(payload) - r.pos} trailing bytes")
    return tensors, text


def save_checkpoint(path, model: Model, train_config: Optional[TrainConfig] = None) -> None:
    atomic_write(path, encode_checkpoint(model.state_dict(), to_text(model.config, train_config)))


def load_checkpoint(path) -> tuple[Model, TrainConfig]:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    tensors, text = decode_checkpoint(payload)
    model_cfg, train_cfg = from_text(text)
    model = build_model(model_cfg)
    model.load_state_dict(tensors)
    return model, train_cfg


# -- datasets ----------------------------------------------------------------------

def encode_dataset(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    labels = np.asarray(ds.labels)
    if n and (labels.min() < 0 or labels.max() > 1):
        raise DataError("dataset labels must be 0 or 1")
    return b"".join([DATASET_MAGIC, struct.pack("<4I", n, c, h, w),
                     labels.astype("u1").tobytes(),
                     np.ascontiguousarray(ds.images, dtype="<f4").tobytes()])


def decode_dataset(payload: bytes) -> Dataset:
    r = _Reader(payload, "dataset")
    if r.take(4) != DATASET_MAGIC:
        raise FormatError("not a fernnet dataset (bad magic)")
    n, c, h, w = r.unpack("4I")
    labels = np.frombuffer(r.take(n), dtype="u1").astype(np.int64)
    data = np.frombuffer(r.take(4 * n * c * h * w), dtype="<f4")
    if r.pos != len(payload):
        raise FormatError(f"dataset has {len(payload) - r.pos} trailing bytes")
    if n and labels.max() > 1:
        raise DataError(f"dataset label {labels.max()} outside {{0, 1}}")
    return Dataset(data.astype(np.float32).reshape(n, c, h, w), labels)


def save_dataset(path, ds: Dataset) -> None:
    atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> Dataset:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc.strerror}") from exc
    return decode_dataset(payload)


# -- IDX digits --------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (big-endian header, as used by MNIST)."""
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file {path}: {exc.strerror}") from exc
    if len(payload) < 4 or payload[:2] != b"\x00\x00":
        raise FormatError(f"{path}: not an IDX file")
    if payload[2] != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX data is supported")
    ndim = payload[3]
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", payload[4:header])
    if len(payload) - header != int(np.prod(shape)):
        raise FormatError(f"{path}: IDX payload size does not match header {shape}")
    return np.frombuffer(payload, dtype="u1", offset=header).reshape(shape)


def load_idx_pair(images_path, labels_path, classes=(0, 1), channels: int = 3) -> Dataset:
    """Two-class subset of an IDX image/label pair; pixels scaled to [-1, 1]."""
    images, labels = read_idx(images_path), read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(f"IDX shapes {images.shape} / {labels.shape} do not pair up")
    keep = np.isin(labels, classes)
    x = images[keep].astype(np.float32) / 127.5 - 1.0
    y = (labels[keep] == classes[1]).astype(np.int64)
    x = np.repeat(x[:, None], channels, axis=1)
    return Dataset(np.ascontiguousarray(x), y)


# -- synthetic texture patches -----------------------------------------------------

# Smooth patches sit this much above zero and gratings this much below.  Without
# it, random phases and orientations make raw-pixel distances uninformative.
BRIGHTNESS_OFFSET = 0.3


def _blob_texture(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((channels, size, size), BRIGHTNESS_OFFSET)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(6.0, 14.0)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img += rng.uniform(-1.5, 1.5, size=(channels, 1, 1)) * bump
    return img


def _stripe_texture(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.15, 0.3)  # cycles per pixel
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return rng.uniform(0.5, 1.0, size=(channels, 1, 1)) * wave - BRIGHTNESS_OFFSET


def synthesize(n: int, seed: int, size: int = 64, channels: int = 3,
               noise: float = 0.35) -> Dataset:
    """Balanced two-class texture patches.

    Class 0 is a smooth sum of a few Gaussian blobs, class 1 an oriented
    high-frequency grating; class 0 is on average brighter.  Both get
    i.i.d. Gaussian pixel noise.
    """
    if n < 2:
        raise DataError(f"need at least 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        texture = (_stripe_texture if label else _blob_texture)(rng, size, channels)
        images[i] = texture + noise * rng.standard_normal(texture.shape)
    return Dataset(images, labels.astype(np.int64))
