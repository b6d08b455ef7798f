"""Datasets, trigger specifications, BadNet poisoning and the TBRD pack format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

POSITIONS = ("tl", "tr", "bl", "br")
POSITION_NAMES = {"top-left": "tl", "top-right": "tr", "bottom-left": "bl", "bottom-right": "br"}
SHAPES = ("square", "bitmap")
NO_SPEC = -1


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so packs roundtrip exactly."""
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images (N, H, W, C) in [0, 1] with labels and poisoning provenance."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    poisoned: np.ndarray = None
    spec_ids: np.ndarray = None
    is_test: np.ndarray = None

    def __post_init__(self):
        n = len(self.images)
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 and n:
            raise ValueError(f"images must be (N, H, W, C), got {images.shape}")
        if n and (images.min() < 0 or images.max() > 1):
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        defaults = {
            "poisoned": np.zeros(n, dtype=bool),
            "spec_ids": np.full(n, NO_SPEC, dtype=np.int64),
            "is_test": np.zeros(n, dtype=bool),
        }
        for name, default in defaults.items():
            value = getattr(self, name)
            value = default if value is None else np.asarray(value, dtype=default.dtype)
            object.__setattr__(self, name, value)
        for name in ("labels", "poisoned", "spec_ids", "is_test"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def has_split(self) -> bool:
        return bool(self.is_test.any())

    def subset(self, index) -> LabeledDataset:
        return LabeledDataset(
            self.images[index], self.labels[index], self.num_classes,
            self.poisoned[index], self.spec_ids[index], self.is_test[index],
        )

    def train(self) -> LabeledDataset:
        return self.subset(~self.is_test)

    def test(self) -> LabeledDataset:
        return self.subset(self.is_test)

    def clean(self) -> LabeledDataset:
        return self.subset(~self.poisoned)


# ---------------------------------------------------------------- synthetic glyphs


def _glyph_masks(size: int, dy: float, dx: float) -> dict[str, np.ndarray]:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = yy - c - dy, xx - c - dx
    R = 0.28 * size
    r = np.hypot(y, x)
    w = 0.22 * R
    box = np.maximum(np.abs(x), np.abs(y))
    return {
        "disk": r <= 0.75 * R,
        "hbar": (np.abs(y) <= w + 0.25) & (np.abs(x) <= R),
        "vbar": (np.abs(x) <= w + 0.25) & (np.abs(y) <= R),
        "cross": ((np.abs(y) <= w) | (np.abs(x) <= w)) & (box <= R),
        "ring": (r >= 0.55 * R) & (r <= R),
        "xcross": ((np.abs(y - x) <= 1.6 * w) | (np.abs(y + x) <= 1.6 * w)) & (r <= R),
        "frame": (box >= 0.5 * R) & (box <= 0.75 * R),
        "triangle": (y <= 0.7 * R) & (y >= -0.8 * R) & (np.abs(x) <= 0.6 * (y + 0.8 * R)),
        "diamond": np.abs(x) + np.abs(y) <= 0.85 * R,
    }


GLYPHS = tuple(_glyph_masks(16, 0, 0))


def generate_synthetic(num_classes: int, per_class: int, image_size: int = 16, seed: int = 0,
                       channels: int = 3, noise: float = 0.04) -> LabeledDataset:
    """Centered colored glyphs on a dark noisy background, one glyph per class.

    The split is stratified: 80% of every class goes to train, the rest to test.
    """
    if image_size < 12:
        raise ValueError("image_size must be >= 12 so corner triggers stay clear of glyphs")
    if not 1 <= num_classes <= len(GLYPHS):
        raise ValueError(f"num_classes must be in [1, {len(GLYPHS)}] (glyph inventory)")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.empty((n, image_size, image_size, channels), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, label in enumerate(labels):
        dy, dx = rng.uniform(-0.5, 0.5, size=2)
        mask = _glyph_masks(image_size, dy, dx)[GLYPHS[label]]
        background = rng.uniform(0.0, 0.2, size=channels)
        color = rng.uniform(0.45, 1.0, size=channels)
        img = np.where(mask[..., None], color, background)
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = quantize(img)
    is_test = np.zeros(n, dtype=bool)
    n_test = per_class - int(round(0.8 * per_class))
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        is_test[rng.choice(idx, size=n_test, replace=False)] = True
    return LabeledDataset(images, labels, num_classes, is_test=is_test)


def ingest_directory(path, seed: int = 0, test_fraction: float = 0.2) -> LabeledDataset:
    """Load ``path/<class>/*.png``; labels follow lexicographic class-directory order."""
    from PIL import Image

    root = Path(path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(d.glob("*.png"))
        if not files:
            raise ValueError(f"{d}: empty class directory")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.load()
                    if im.mode not in ("L", "RGB"):
                        im = im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as exc:
                raise ValueError(f"{f}: unreadable image ({exc})") from exc
            if arr.ndim == 2:
                arr = arr[..., None]
            if images and arr.shape != images[0].shape:
                raise ValueError(f"{f}: mixed sizes, {arr.shape} vs {images[0].shape}")
            images.append(arr)
            labels.append(label)
    labels = np.array(labels)
    rng = np.random.default_rng(seed)
    is_test = np.zeros(len(labels), dtype=bool)
    for k in range(len(class_dirs)):
        idx = np.flatnonzero(labels == k)
        n_test = int(round(test_fraction * len(idx)))
        if n_test:
            is_test[rng.choice(idx, size=n_test, replace=False)] = True
    return LabeledDataset(np.stack(images), labels, len(class_dirs), is_test=is_test)


# ---------------------------------------------------------------- triggers


def swirl_stencil(size: int) -> np.ndarray:
    """Asymmetric spiral-arm stencil, the stand-in for a logo trigger."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(yy - c, xx - c) / max(c, 0.5)
    theta = np.arctan2(yy - c, xx - c)
    arm = np.mod(theta / (2 * np.pi) + 0.8 * r, 1.0) < 0.5
    stencil = arm & (r <= 1.45)
    stencil[int(round(c)), int(round(c))] = True
    return stencil


@dataclass(eq=False)
class TriggerSpec:
    """A planted trigger: a corner-anchored stencil filled with a color pattern."""

    shape: str
    position: str
    size: int
    target_class: int
    offset: int = 0
    color: tuple[float, ...] = (1.0, 1.0, 1.0)
    stencil: np.ndarray | None = field(default=None, repr=False)
    pattern: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.position = POSITION_NAMES.get(self.position, self.position)
        if self.shape not in SHAPES:
            raise ValueError(f"trigger shape must be one of {SHAPES}, got {self.shape!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"trigger position must be one of {POSITIONS}, got {self.position!r}")
        if self.size < 1 or self.offset < 0:
            raise ValueError("trigger size must be positive and offset non-negative")
        if self.stencil is None:
            self.stencil = np.ones((self.size, self.size), bool) if self.shape == "square" else swirl_stencil(self.size)
        self.stencil = np.asarray(self.stencil, dtype=bool)
        if self.stencil.shape != (self.size, self.size):
            raise ValueError(f"stencil shape {self.stencil.shape} != ({self.size}, {self.size})")
        if self.pattern is None:
            self.pattern = np.broadcast_to(np.asarray(self.color, np.float32), (self.size, self.size, len(self.color)))
        self.pattern = quantize(np.asarray(self.pattern, dtype=np.float32))

    def anchor(self, height: int, width: int) -> tuple[int, int]:
        s, o = self.size, self.offset
        row = o if self.position[0] == "t" else height - o - s
        col = o if self.position[1] == "l" else width - o - s
        if row < 0 or col < 0 or row + s > height or col + s > width:
            raise ValueError(f"trigger of size {s} at {self.position}+{o} does not fit a {height}x{width} image")
        return row, col

    def mask(self, height: int, width: int) -> np.ndarray:
        """Full-image binary mask (H, W)."""
        row, col = self.anchor(height, width)
        m = np.zeros((height, width), dtype=np.float32)
        m[row : row + self.size, col : col + self.size] = self.stencil
        return m

    def full_pattern(self, height: int, width: int, channels: int) -> np.ndarray:
        row, col = self.anchor(height, width)
        if self.pattern.shape[2] != channels:
            raise ValueError(f"pattern has {self.pattern.shape[2]} channels, image has {channels}")
        p = np.zeros((height, width, channels), dtype=np.float32)
        p[row : row + self.size, col : col + self.size] = self.pattern
        return p

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "position": self.position,
            "offset": self.offset,
            "size": self.size,
            "target_class": self.target_class,
            "stencil": ["".join("1" if v else "0" for v in row) for row in self.stencil],
            "pattern": [
                ["".join(f"{int(round(v * 255)):02x}" for v in px) for px in row] for row in self.pattern
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TriggerSpec:
        stencil = np.array([[ch == "1" for ch in row] for row in d["stencil"]], dtype=bool)
        pattern = np.array(
            [[[int(px[i : i + 2], 16) / 255.0 for i in range(0, len(px), 2)] for px in row] for row in d["pattern"]],
            dtype=np.float32,
        )
        return cls(d["shape"], d["position"], int(d["size"]), int(d["target_class"]),
                   offset=int(d.get("offset", 0)), stencil=stencil, pattern=pattern)


def stamp(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Replace the pixels under the stencil by the pattern; works on one image or a batch."""
    image = np.asarray(image, dtype=np.float32)
    h, w, c = image.shape[-3:]
    m = spec.mask(h, w)[..., None]
    return (image * (1.0 - m) + spec.full_pattern(h, w, c) * m).astype(np.float32)


def poison(data: LabeledDataset, specs: list[TriggerSpec], rate: float = 0.1, seed: int = 0) -> LabeledDataset:
    """BadNet poisoning: stamp, relabel and append copies of random clean training samples.

    Each spec draws ``floor(rate * n_train)`` samples independently from the
    clean training split. The test split is left untouched.
    """
    if not specs:
        raise ValueError("poison: at least one trigger spec is required")
    if not 0 < rate <= 0.5:
        raise ValueError(f"poison: rate must lie in (0, 0.5], got {rate}")
    for spec in specs:
        if not 0 <= spec.target_class < data.num_classes:
            raise ValueError(f"poison: target class {spec.target_class} out of range [0, {data.num_classes})")
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(~data.is_test & ~data.poisoned)
    n_train = int((~data.is_test).sum())
    k = int(np.floor(rate * n_train))
    parts = [data]
    for sid, spec in enumerate(specs):
        chosen = np.sort(rng.choice(pool, size=k, replace=False))
        parts.append(LabeledDataset(
            stamp(data.images[chosen], spec),
            np.full(k, spec.target_class),
            data.num_classes,
            poisoned=np.ones(k, bool),
            spec_ids=np.full(k, sid),
            is_test=np.zeros(k, bool),
        ))
    return concat_datasets(parts)


def concat_datasets(parts: list[LabeledDataset]) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        np.concatenate([p.poisoned for p in parts]),
        np.concatenate([p.spec_ids for p in parts]),
        np.concatenate([p.is_test for p in parts]),
    )


def attack_success(classify_fn, data: LabeledDataset, spec: TriggerSpec) -> float:
    """Fraction of stamped clean test images (true label != target) sent to the target."""
    pool = data.test() if data.has_split else data
    pool = pool.subset(~pool.poisoned & (pool.labels != spec.target_class))
    if len(pool) == 0:
        raise ValueError("attack_success: no non-target clean samples")
    return float(np.mean(classify_fn(stamp(pool.images, spec)) == spec.target_class))


# ---------------------------------------------------------------- TBRD packs

PACK_MAGIC = b"TBRD"
PACK_VERSION = 1
FLAG_POISONED = 0x01
FLAG_TEST = 0x02
_PACK_HEADER = struct.Struct("<4sIIHHBH")


def pack_bytes(data: LabeledDataset) -> bytes:
    n = len(data)
    h, w, c = data.image_shape
    header = _PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, n, h, w, c, data.num_classes)
    pixels = np.round(data.images * 255.0).astype(np.uint8).reshape(n, -1)
    flags = data.poisoned.astype(np.uint8) * FLAG_POISONED | data.is_test.astype(np.uint8) * FLAG_TEST
    spec_ids = np.where(data.spec_ids < 0, 255, data.spec_ids).astype(np.uint8)
    record = np.dtype([("px", np.uint8, h * w * c), ("label", "<u2"), ("flags", "u1"), ("spec", "u1")])
    rows = np.empty(n, dtype=record)
    rows["px"] = pixels
    rows["label"] = data.labels
    rows["flags"] = flags
    rows["spec"] = spec_ids
    return header + rows.tobytes()


def unpack_bytes(blob: bytes) -> LabeledDataset:
    from .model import BadMagicError, TruncatedFileError, VersionMismatchError, FormatError

    if blob[:4] != PACK_MAGIC:
        raise BadMagicError(f"bad magic: expected {PACK_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < _PACK_HEADER.size:
        raise TruncatedFileError("truncated pack header")
    _, version, n, h, w, c, num_classes = _PACK_HEADER.unpack_from(blob)
    if version != PACK_VERSION:
        raise VersionMismatchError(f"version mismatch: pack has {version}, reader supports {PACK_VERSION}")
    record = np.dtype([("px", np.uint8, h * w * c), ("label", "<u2"), ("flags", "u1"), ("spec", "u1")])
    body = blob[_PACK_HEADER.size :]
    if len(body) < n * record.itemsize:
        raise TruncatedFileError(f"truncated pack: {n} samples need {n * record.itemsize} bytes, found {len(body)}")
    if len(body) > n * record.itemsize:
        raise FormatError("trailing bytes after last sample")
    rows = np.frombuffer(body, dtype=record, count=n)
    spec = rows["spec"].astype(np.int64)
    return LabeledDataset(
        rows["px"].reshape(n, h, w, c).astype(np.float32) / 255.0,
        rows["label"].astype(np.int64),
        num_classes,
        poisoned=(rows["flags"] & FLAG_POISONED) > 0,
        spec_ids=np.where(spec == 255, NO_SPEC, spec),
        is_test=(rows["flags"] & FLAG_TEST) > 0,
    )


def save_pack(data: LabeledDataset, path) -> Path:
    path = Path(path)
    path.write_bytes(pack_bytes(data))
    return path


def load_pack(path) -> LabeledDataset:
    return unpack_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- trigger manifests

MANIFEST_FORMAT = "trojanscan-triggers"


def write_manifest(path, specs: list[TriggerSpec], model_id: str | None = None, **meta) -> Path:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "model_id": model_id,
        **meta,
        "triggers": [{"id": i, **s.to_dict()} for i, s in enumerate(specs)],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> tuple[list[TriggerSpec], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a trigger manifest")
    specs = [TriggerSpec.from_dict(t) for t in sorted(doc["triggers"], key=lambda t: t["id"])]
    meta = {k: v for k, v in doc.items() if k != "triggers"}
    return specs, meta


def with_target(spec: TriggerSpec, target: int) -> TriggerSpec:
    return replace(spec, target_class=target)
