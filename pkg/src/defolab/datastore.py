"""
Toy datasets, dataset persistence and training checkpoints.

Images are colored shapes on gray textured backgrounds; a class is a
(shape, color) pair and the texture is a nuisance attribute. Datasets are
stored as a ``key = value`` manifest next to record-format blobs.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import records
from .encoders import default_vocabulary, split_words

DATASET_MAGIC = b"DFODATA1"
CHECKPOINT_MAGIC = b"DFOCKPT1"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

COLOR_RGB = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.12, 0.20, 0.92),
    "yellow": (0.92, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.08),
    "cyan": (0.10, 0.85, 0.85),
    "pink": (0.95, 0.45, 0.70),
}
# centre offset range, as a fraction of the image size
POSITION_JITTER = 0.05

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
TEXTURES = ("plain", "stripes", "dots", "checks", "grid", "waves")

CAPTION_TEMPLATES = (
    "a {color} {shape} on {texture}",
    "a photo of a {color} {shape} on {texture}",
    "a photo of a {color} {shape}",
    "a picture of a {color} {shape}",
    "a {color} {shape}",
    "a {color} {shape} with {texture}",
    "an image of a {color} {shape}",
)


class DataError(ValueError):
    """Dataset or checkpoint content is inconsistent."""


@dataclass(frozen=True)
class ToyGrammar:
    """Attribute grammar; classes are ``shapes x colors`` in that order."""

    shapes: Tuple[str, ...] = ("circle", "square", "triangle")
    colors: Tuple[str, ...] = ("red", "blue")
    textures: Tuple[str, ...] = ("plain", "stripes", "dots")

    def validate(self) -> List[str]:
        errors = []
        for kind, names, known in (("shape", self.shapes, SHAPES), ("color", self.colors, COLOR_RGB),
                                   ("texture", self.textures, TEXTURES)):
            if not names:
                errors.append(f"grammar needs at least one {kind}")
            if len(set(names)) != len(names):
                errors.append(f"duplicate {kind} names")
            errors += [f"unknown {kind} {n!r}" for n in names if n not in known]
        if len(self.shapes) * len(self.colors) < 2:
            errors.append("grammar must define at least 2 classes")
        return errors

    @property
    def classes(self) -> List[Tuple[str, str]]:
        return list(itertools.product(self.shapes, self.colors))

    @property
    def class_names(self) -> List[str]:
        return [f"{color} {shape}" for shape, color in self.classes]

    @property
    def words(self) -> List[str]:
        return list(self.shapes) + list(self.colors) + list(self.textures)

    @classmethod
    def parse(cls, text: str) -> "ToyGrammar":
        """``shapes=circle,square; colors=red,blue; textures=plain``"""
        parts = {}
        for chunk in text.split(";"):
            if chunk.strip():
                key, _, value = chunk.partition("=")
                parts[key.strip()] = tuple(v.strip() for v in value.split(",") if v.strip())
        return cls(**parts)

    def format(self) -> str:
        return "; ".join(f"{k}={','.join(getattr(self, k))}" for k in ("shapes", "colors", "textures"))


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    split: str = "train"
    captions: Optional[List[str]] = None
    attributes: Optional[List[Tuple[str, str, str]]] = field(default=None, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        errors = self.validate()
        if errors:
            raise DataError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        k = len(self.class_names)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            errors.append(f"images must be (N, w, h, 3), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            errors.append(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            errors.append(f"labels must lie in [0, {k})")
        if self.split not in ("train", "test"):
            errors.append(f"split must be train or test, got {self.split!r}")
        if self.captions is not None and len(self.captions) != len(self.images):
            errors.append("captions must cover every image")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            errors.append("pixel values must lie in [0, 1]")
        vocab = set(default_vocabulary())
        for name in self.class_names:
            if not any(w in vocab for w in split_words(name)):
                errors.append(f"class name {name!r} has no known vocabulary word")
        return errors

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.images[index], self.labels[index], list(self.class_names), self.split,
            None if self.captions is None else [self.captions[i] for i in index],
            None if self.attributes is None else [self.attributes[i] for i in index],
        )

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
                and self.class_names == other.class_names and self.split == other.split
                and self.captions == other.captions)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _texture(name: str, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(size[0]), np.arange(size[1]), indexing="ij")
    base = rng.uniform(0.40, 0.60)
    phase = rng.integers(0, 8)
    if name == "plain":
        pattern = np.zeros(size)
    elif name == "stripes":
        pattern = np.where(((xs + phase) // 3) % 2 == 0, 1.0, -1.0)
    elif name == "dots":
        pattern = np.where(((xs + phase) % 6 < 2) & ((ys + phase) % 6 < 2), 1.0, -0.2)
    elif name == "checks":
        pattern = np.where((((xs + phase) // 4) + ((ys + phase) // 4)) % 2 == 0, 1.0, -1.0)
    elif name == "grid":
        pattern = np.where(((xs + phase) % 8 == 0) | ((ys + phase) % 8 == 0), 1.0, -0.15)
    elif name == "waves":
        pattern = np.sin(2 * np.pi * (xs + 2 * np.sin(2 * np.pi * ys / 16)) / 8 + phase)
    else:
        raise DataError(f"unknown texture {name!r}")
    gray = base + 0.12 * pattern
    return np.repeat(gray[..., None], 3, axis=-1)


def _shape_mask(name: str, size: Tuple[int, int], cx: float, cy: float, r: float) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(size[0]) + 0.5, np.arange(size[1]) + 0.5, indexing="ij")
    dx, dy = xs - cx, ys - cy
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if name == "triangle":
        # apex at low y, base at high y
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if name == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise DataError(f"unknown shape {name!r}")


def render_image(shape: str, color: str, texture: str, rng: np.random.Generator,
                 size: Tuple[int, int] = (32, 32)) -> np.ndarray:
    """One ``(w, h, 3)`` image in [0, 1]."""
    img = _texture(texture, size, rng)
    r = rng.uniform(0.26, 0.34) * min(size)
    cx = size[0] / 2 + rng.uniform(-POSITION_JITTER, POSITION_JITTER) * size[0]
    cy = size[1] / 2 + rng.uniform(-POSITION_JITTER, POSITION_JITTER) * size[1]
    mask = _shape_mask(shape, size, cx, cy, r)
    rgb = np.clip(np.asarray(COLOR_RGB[color]) + rng.normal(0, 0.03, 3), 0, 1)
    img[mask] = rgb
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_toy_dataset(grammar: ToyGrammar, n: int, seed: int, split: str = "train",
                         size: Tuple[int, int] = (32, 32)) -> Dataset:
    """
    Balanced dataset of ``n`` rendered images; class counts differ by at most
    one. Captions follow ``"a <color> <shape> on <texture>"``.
    """
    errors = grammar.validate()
    if errors:
        raise DataError("invalid grammar: " + "; ".join(errors))
    classes = grammar.classes
    k = len(classes)
    if n < k:
        raise DataError(f"need at least one example per class ({k}), got n={n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    images = np.empty((n, size[0], size[1], 3))
    captions, attributes = [], []
    for i, label in enumerate(labels):
        shape, color = classes[label]
        texture = grammar.textures[rng.integers(len(grammar.textures))]
        images[i] = render_image(shape, color, texture, rng, size)
        captions.append(f"a {color} {shape} on {texture}")
        attributes.append((shape, color, texture))
    return Dataset(images, labels, grammar.class_names, split, captions, attributes)


def caption_corpus(dataset: Dataset, seed: int) -> List[str]:
    """One caption per image, drawn from a small set of phrasings."""
    if dataset.attributes is None:
        if dataset.captions is None:
            raise DataError("dataset has neither captions nor attributes")
        return list(dataset.captions)
    rng = np.random.default_rng(seed)
    out = []
    for shape, color, texture in dataset.attributes:
        tpl = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))]
        out.append(tpl.format(color=color, shape=shape, texture=texture))
    return out


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    """Write ``manifest.txt`` plus blobs into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs = {
        "images.bin": {"images": dataset.images},
        "labels.bin": {"labels": dataset.labels.astype(np.float64)},
    }
    crcs = {}
    for fname, tensors in blobs.items():
        crcs[fname] = records.write(root / fname, DATASET_MAGIC, {"kind": fname[:-4]}, tensors)
    if dataset.captions is not None:
        data = ("\n".join(dataset.captions) + "\n").encode("utf-8")
        (root / "captions.txt").write_bytes(data)
        crcs["captions.txt"] = zlib.crc32(data)
    n, w, h, _ = dataset.images.shape
    meta = {
        "version": DATASET_VERSION,
        "kind": "dataset",
        "split": dataset.split,
        "n_examples": n,
        "k": dataset.k,
        "w": w,
        "h": h,
        "class_names": ",".join(dataset.class_names),
        "blobs": ",".join(f"{name}:{crc:08x}" for name, crc in crcs.items()),
    }
    if dataset.attributes is not None:
        meta["attributes"] = ",".join("/".join(a) for a in dataset.attributes)
    (root / "manifest.txt").write_text(records.format_meta(meta), encoding="utf-8")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    meta = records.parse_meta(manifest.read_text(encoding="utf-8"))
    required = ("version", "kind", "n_examples", "k", "w", "h", "class_names", "blobs")
    missing = [key for key in required if key not in meta]
    if missing:
        raise DataError(f"manifest lacks keys: {', '.join(missing)}")
    if int(meta["version"]) != DATASET_VERSION:
        raise records.VersionError(f"dataset version {meta['version']}, expected {DATASET_VERSION}")
    crcs = {}
    for item in meta["blobs"].split(","):
        name, _, crc = item.partition(":")
        crcs[name] = int(crc, 16)
    for name in crcs:
        if not (root / name).exists():
            raise DataError(f"missing blob file {root / name}")
    for name, crc in crcs.items():
        if zlib.crc32((root / name).read_bytes()) != crc:
            raise records.ChecksumError(f"blob {name} does not match its manifest CRC32")
    _, img = records.read(root / "images.bin", DATASET_MAGIC)
    _, lab = records.read(root / "labels.bin", DATASET_MAGIC)
    images, labels = img["images"], lab["labels"]
    n, k = int(meta["n_examples"]), int(meta["k"])
    class_names = meta["class_names"].split(",")
    if images.shape != (n, int(meta["w"]), int(meta["h"]), 3) or labels.shape != (n,):
        raise DataError("blob shapes disagree with the manifest")
    if len(class_names) != k:
        raise DataError(f"manifest lists {len(class_names)} class names for k={k}")
    if (labels >= k).any() or (labels < 0).any() or (labels != np.round(labels)).any():
        raise DataError(f"labels must be integers in [0, {k})")
    captions = None
    if "captions.txt" in crcs:
        captions = (root / "captions.txt").read_text(encoding="utf-8").splitlines()
    attributes = None
    if meta.get("attributes"):
        attributes = [tuple(a.split("/")) for a in meta["attributes"].split(",")]
    return Dataset(images, labels.astype(np.int64), class_names, meta.get("split", "train"),
                   captions, attributes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    variant: str
    tensors: Dict[str, np.ndarray]
    step: int
    epoch: int
    config_digest: str
    rng_state: Dict
    version: int = CHECKPOINT_VERSION
    extra: Dict[str, str] = field(default_factory=dict)

    def equals(self, other: "Checkpoint") -> bool:
        return (self.variant == other.variant and self.step == other.step and self.epoch == other.epoch
                and self.config_digest == other.config_digest and self.rng_state == other.rng_state
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "version": ckpt.version,
        "variant": ckpt.variant,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "config_digest": ckpt.config_digest,
        "rng_state": json.dumps(ckpt.rng_state, sort_keys=True),
    }
    meta.update({f"extra.{k}": v for k, v in ckpt.extra.items()})
    records.write(path, CHECKPOINT_MAGIC, meta, ckpt.tensors)


def load_checkpoint(path, variant: Optional[str] = None, digest: Optional[str] = None,
                    strict_digest: bool = True) -> Checkpoint:
    """
    Read a checkpoint, optionally checking its protocol variant and config
    digest. A digest mismatch raises when ``strict_digest`` else warns.
    """
    meta, tensors = records.read(path, CHECKPOINT_MAGIC)
    version = int(meta["version"])
    if version != CHECKPOINT_VERSION:
        raise records.VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if variant is not None and meta["variant"] != variant:
        raise DataError(f"checkpoint holds protocol {meta['variant']!r}, expected {variant!r}")
    if digest is not None and meta["config_digest"] != digest:
        msg = f"checkpoint config digest {meta['config_digest']} differs from {digest}"
        if strict_digest:
            raise DataError(msg)
        warnings.warn(msg, stacklevel=2)
    extra = {k[6:]: v for k, v in meta.items() if k.startswith("extra.")}
    return Checkpoint(meta["variant"], tensors, int(meta["step"]), int(meta["epoch"]),
                      meta["config_digest"], json.loads(meta["rng_state"]), version, extra)
