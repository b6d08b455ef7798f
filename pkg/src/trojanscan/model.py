"""Small CNN classifiers: architecture, training, inference, TBRM files."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import Tensor

if TYPE_CHECKING:
    from .data import LabeledDataset

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "softmax")
KERNEL_SIZE = 3


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    units: int | None = None  # output channels for conv, width for dense

    def __str__(self) -> str:
        return f"{self.kind}({self.units})" if self.units is not None else self.kind


@dataclass(frozen=True)
class Architecture:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) after each layer.

        Raises ArchitectureError naming the first layer whose input does not fit.
        """
        if self.num_classes < 1:
            raise ArchitectureError("num_classes must be positive")
        shape: tuple[int, ...] = tuple(self.input_shape)
        out = []
        last_dense = None
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer})"
            if layer.kind not in LAYER_KINDS:
                raise ArchitectureError(f"{where}: unknown kind")
            if layer.kind == "conv":
                if len(shape) != 3 or shape[0] < KERNEL_SIZE or shape[1] < KERNEL_SIZE:
                    raise ArchitectureError(f"{where}: cannot convolve input of shape {shape}")
                if not layer.units or layer.units < 1:
                    raise ArchitectureError(f"{where}: needs a positive channel count")
                shape = (shape[0] - KERNEL_SIZE + 1, shape[1] - KERNEL_SIZE + 1, layer.units)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ArchitectureError(f"{where}: cannot pool input of shape {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ArchitectureError(f"{where}: dense layer needs flat input, got {shape}")
                if not layer.units or layer.units < 1:
                    raise ArchitectureError(f"{where}: needs a positive width")
                shape = (layer.units,)
                last_dense = i
            elif layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ArchitectureError(f"{where}: softmax must be the final layer")
            out.append(shape)
        if last_dense is None:
            raise ArchitectureError("architecture has no dense output layer")
        if shape != (self.num_classes,):
            raise ArchitectureError(
                f"layer {len(self.layers) - 1} ({self.layers[-1]}): output width {shape} "
                f"!= num_classes {self.num_classes}"
            )
        return out

    def weight_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = self.shapes()
        prev: tuple[int, ...] = tuple(self.input_shape)
        result = []
        for i, (layer, shape) in enumerate(zip(self.layers, shapes)):
            if layer.kind == "conv":
                result.append((f"conv{i}.kernel", (KERNEL_SIZE, KERNEL_SIZE, prev[2], layer.units)))
                result.append((f"conv{i}.bias", (layer.units,)))
            elif layer.kind == "dense":
                result.append((f"dense{i}.kernel", (prev[0], layer.units)))
                result.append((f"dense{i}.bias", (layer.units,)))
            prev = shape
        return result

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for _, s in self.weight_shapes()))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [[l.kind, l.units] if l.units is not None else [l.kind] for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        layers = tuple(Layer(e[0], e[1] if len(e) > 1 else None) for e in d["layers"])
        return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]))


def desk_architecture(num_classes: int, input_shape=(16, 16, 3), width: int = 8) -> Architecture:
    """Two 3x3 convolutions, one max-pool and a dense softmax head."""
    layers = (
        Layer("conv", width), Layer("relu"),
        Layer("conv", width), Layer("relu"),
        Layer("maxpool"), Layer("flatten"),
        Layer("dense", num_classes), Layer("softmax"),
    )
    return Architecture(layers, tuple(input_shape), num_classes)


def _conv_blocks(blocks: list[int], width: int, num_classes: int, input_shape) -> Architecture:
    layers: list[Layer] = []
    for i, n in enumerate(blocks):
        for _ in range(n):
            layers += [Layer("conv", width * 2**i), Layer("relu")]
        layers.append(Layer("maxpool"))
    layers += [Layer("flatten"), Layer("dense", num_classes), Layer("softmax")]
    return Architecture(tuple(layers), tuple(input_shape), num_classes)


def six_conv_architecture(num_classes: int, input_shape=(32, 32, 3), width: int = 8) -> Architecture:
    """6 Conv + 2 MaxPooling network (three convolutions per block)."""
    return _conv_blocks([3, 3], width, num_classes, input_shape)


def ten_conv_architecture(num_classes: int, input_shape=(160, 160, 3), width: int = 4) -> Architecture:
    """10 Conv + 5 MaxPooling network (two convolutions per block).

    Valid convolutions shrink quickly, so inputs must be at least 156 pixels wide.
    """
    return _conv_blocks([2, 2, 2, 2, 2], width, num_classes, input_shape)


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class Network:
    architecture: Architecture
    weights: list[Tensor]
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.architecture.weight_shapes()
        if len(expected) != len(self.weights):
            raise ArchitectureError(f"expected {len(expected)} weight tensors, got {len(self.weights)}")
        for (name, shape), w in zip(expected, self.weights):
            if tuple(w.shape) != shape:
                raise ArchitectureError(f"{name}: expected shape {shape}, got {w.shape}")

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.architecture.input_shape

    def weight_names(self) -> list[str]:
        return [name for name, _ in self.architecture.weight_shapes()]

    def copy(self) -> Network:
        return Network(
            self.architecture,
            [Tensor(w.data.copy()) for w in self.weights],
            copy.deepcopy(self.training_meta),
        )

    def logits(self, x: Tensor) -> Tensor:
        """Forward pass up to (not including) the trailing softmax."""
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise T.ShapeError(f"network expects (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        h = x
        it = iter(self.weights)
        for layer in self.architecture.layers:
            if layer.kind == "conv":
                kernel, bias = next(it), next(it)
                h = T.add(T.conv2d(h, kernel), bias)
            elif layer.kind == "dense":
                kernel, bias = next(it), next(it)
                h = T.add(T.matmul(h, kernel), bias)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "maxpool":
                h = T.maxpool2d(h)
            elif layer.kind == "flatten":
                h = T.flatten(h)
        return h

    __call__ = logits


def build(arch: Architecture, seed: int, dtype=np.float32) -> Network:
    """Glorot-uniform kernels and zero biases drawn from a seeded generator."""
    arch.shapes()
    rng = np.random.default_rng(seed)
    weights = []
    for name, shape in arch.weight_shapes():
        if name.endswith(".bias"):
            weights.append(Tensor(np.zeros(shape, dtype=dtype)))
            continue
        if len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype)))
    return Network(arch, weights, {"seed": seed, "epochs": 0})


def _as_batch(net: Network, batch) -> np.ndarray:
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or tuple(arr.shape[1:]) != tuple(net.input_shape):
        raise T.ShapeError(f"predict: batch shape {arr.shape} does not match input shape {net.input_shape}")
    return arr


def predict(net: Network, batch, chunk: int = 512) -> np.ndarray:
    """Class-probability matrix, one row per image."""
    arr = _as_batch(net, batch)
    dtype = net.weights[0].dtype
    rows = []
    for start in range(0, len(arr), chunk):
        x = Tensor(arr[start : start + chunk].astype(dtype, copy=False))
        rows.append(T.softmax(net.logits(x)).data)
    if not rows:
        return np.zeros((0, net.num_classes), dtype=dtype)
    return np.concatenate(rows)


def classify(net: Network, batch) -> np.ndarray:
    return predict(net, batch).argmax(axis=1)


def accuracy(net: Network, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy: empty dataset")
    return float(np.mean(classify(net, data.images) == data.labels))


def train(net: Network, data: LabeledDataset, cfg: TrainConfig) -> Network:
    """Train a copy of ``net`` with Adam on the training split of ``data``.

    Batches are reshuffled every epoch from a generator seeded by ``cfg.seed``.
    The clean test-split accuracy (train split if there is no test split) is
    stored in ``training_meta``.
    """
    train_set = data.train() if data.has_split else data
    if len(train_set) == 0:
        raise ValueError("train: empty dataset")
    if train_set.labels.max() >= net.num_classes or train_set.labels.min() < 0:
        raise ValueError(f"train: labels must lie in [0, {net.num_classes})")

    out = net.copy()
    if cfg.epochs == 0:
        return out
    params = out.weights
    for p in params:
        p.requires_grad = True
    opt = T.Adam(params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    dtype = params[0].dtype
    images = train_set.images.astype(dtype, copy=False)
    labels = train_set.labels
    n = len(train_set)
    for epoch in range(cfg.epochs):
        order = np.arange(n)
        rng.shuffle(order)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with T.GradTape() as tape:
                loss = T.softmax_cross_entropy(out.logits(Tensor(images[idx])), labels[idx])
            opt.step(tape.backward(loss))
            total += loss.item() * len(idx)
        logger.debug("epoch %d loss %.4f", epoch + 1, total / n)
    for p in params:
        p.requires_grad = False

    eval_set = data.test() if data.has_split and len(data.test()) else train_set
    out.training_meta = {
        **out.training_meta,
        "epochs": int(out.training_meta.get("epochs", 0)) + cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "train_seed": cfg.seed,
        "accuracy": accuracy(out, eval_set),
    }
    logger.info("trained %d epochs, clean accuracy %.4f", cfg.epochs, out.training_meta["accuracy"])
    return out


# ---------------------------------------------------------------- TBRM files

MODEL_MAGIC = b"TBRM"
FORMAT_VERSION = 1
HEADER_PREFIX = "@header:"


class FormatError(Exception):
    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedFileError(FormatError):
    code = "truncated"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class ChecksumError(FormatError):
    code = "checksum"


def encode_entries(magic: bytes, entries: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named float arrays in the TBRM container layout."""
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_entries(blob: bytes, magic: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, found {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncatedFileError("truncated file: header incomplete")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedFileError(f"truncated file: needed {n} bytes at offset {pos}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        entries.append((name, arr))
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes before checksum")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    return entries


def header_entry(payload: dict) -> tuple[str, np.ndarray]:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return HEADER_PREFIX + text, np.zeros((0,), dtype=np.float32)


def split_header(entries: list[tuple[str, np.ndarray]]) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if not entries or not entries[0][0].startswith(HEADER_PREFIX):
        raise FormatError("missing header entry")
    return json.loads(entries[0][0][len(HEADER_PREFIX) :]), entries[1:]


def model_bytes(net: Network) -> bytes:
    entries = [header_entry({"architecture": net.architecture.to_dict(), "meta": net.training_meta})]
    entries += [(name, w.data) for name, w in zip(net.weight_names(), net.weights)]
    return encode_entries(MODEL_MAGIC, entries)


def model_id(blob: bytes) -> str:
    # not the CRC: every file ends in its own CRC32, so CRC32(file) is one constant
    return hashlib.sha256(blob).hexdigest()[:16]


def save(net: Network, path) -> Path:
    path = Path(path)
    path.write_bytes(model_bytes(net))
    return path


def loads(blob: bytes) -> Network:
    header, entries = split_header(decode_entries(blob, MODEL_MAGIC))
    arch = Architecture.from_dict(header["architecture"])
    try:
        expected = arch.weight_shapes()
    except ArchitectureError as exc:
        raise FormatError(f"invalid architecture in header: {exc}") from exc
    names = [name for name, _ in entries]
    if names != [name for name, _ in expected]:
        raise FormatError(f"weight entries {names} do not match architecture")
    return Network(arch, [Tensor(arr) for _, arr in entries], header.get("meta", {}))


def load(path) -> Network:
    return loads(Path(path).read_bytes())


def read_weights(path) -> dict[str, np.ndarray]:
    """Raw named arrays of any TBRM file, header entry or not."""
    entries = decode_entries(Path(path).read_bytes(), MODEL_MAGIC)
    return {name: arr for name, arr in entries if not name.startswith(HEADER_PREFIX)}
