"""
Frozen toy dual encoder.

The vision tower patchifies a ``w x h x 3`` image, runs a small pre-norm
transformer, mean-pools and projects to the shared latent space. The text
tower adds learned positions to an ``m x d_e`` embedding sequence, runs its
own transformer and reads out the last position. Both outputs are unit norm.

Sequences are content vectors only; positions always come from the encoder,
so trainable query slots are plain rows of the input sequence.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numcore as nc
from . import records
from .numcore import ShapeError, Tensor

PACK_MAGIC = b"DFOPACK1"
PAD, UNK = 0, 1
PAD_WORD, UNK_WORD = "<pad>", "<unk>"

# provenance tags for TokenSequence positions
WORD, UNKNOWN, SLOT, PADDING = "word", "unk", "slot", "pad"


def default_vocabulary() -> List[str]:
    text = resources.files("defolab").joinpath("assets/vocab.txt").read_text(encoding="utf-8")
    return read_vocabulary_text(text)


def read_vocabulary_text(text: str) -> List[str]:
    words = [line.strip() for line in text.splitlines() if line.strip()]
    if len(words) < 3 or words[PAD] != PAD_WORD or words[UNK] != UNK_WORD:
        raise ValueError("vocabulary must start with <pad> and <unk> rows")
    if len(set(words)) != len(words):
        raise ValueError("vocabulary contains duplicate words")
    return words


def load_vocabulary(path) -> List[str]:
    return read_vocabulary_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class EncoderConfig:
    image_width: int = 32
    image_height: int = 32
    patch_size: int = 8
    latent_dim: int = 64
    embed_dim: int = 32
    text_len: int = 16
    depth_v: int = 2
    depth_t: int = 2
    heads: int = 4
    vocab_size: int = 256

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = [f"{f.name} must be a positive integer" for f in fields(self)
                  if not isinstance(getattr(self, f.name), int) or getattr(self, f.name) <= 0]
        if errors:
            return errors
        if self.image_width % self.patch_size or self.image_height % self.patch_size:
            errors.append("image_width and image_height must be divisible by patch_size")
        if self.embed_dim % self.heads:
            errors.append("embed_dim must be divisible by heads")
        if self.vocab_size < 3:
            errors.append("vocab_size must leave room for <pad>, <unk> and at least one word")
        return errors

    @property
    def n_patches(self) -> int:
        return (self.image_width // self.patch_size) * (self.image_height // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_meta(self) -> Dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: Dict[str, str]) -> "EncoderConfig":
        return cls(**{f.name: int(meta[f"config.{f.name}"]) for f in fields(cls)})


def _block_shapes(prefix: str, width: int) -> Dict[str, tuple]:
    return {
        f"{prefix}ln1.g": (width,), f"{prefix}ln1.b": (width,),
        f"{prefix}attn.wq": (width, width), f"{prefix}attn.wk": (width, width),
        f"{prefix}attn.wv": (width, width), f"{prefix}attn.wo": (width, width),
        f"{prefix}ln2.g": (width,), f"{prefix}ln2.b": (width,),
        f"{prefix}mlp.w1": (width, 4 * width), f"{prefix}mlp.b1": (4 * width,),
        f"{prefix}mlp.w2": (4 * width, width), f"{prefix}mlp.b2": (width,),
    }


def expected_shapes(config: EncoderConfig) -> Dict[str, tuple]:
    """Every named weight of a pack with its shape, in serialization order."""
    e, d = config.embed_dim, config.latent_dim
    shapes = {
        "vision.patch.w": (config.patch_dim, e),
        "vision.patch.b": (e,),
        "vision.pos": (config.n_patches, e),
    }
    for i in range(config.depth_v):
        shapes.update(_block_shapes(f"vision.blocks.{i}.", e))
    shapes.update({"vision.ln_f.g": (e,), "vision.ln_f.b": (e,), "vision.proj": (e, d)})
    shapes["text.pos"] = (config.text_len, e)
    for i in range(config.depth_t):
        shapes.update(_block_shapes(f"text.blocks.{i}.", e))
    shapes.update({"text.ln_f.g": (e,), "text.ln_f.b": (e,), "text.proj": (e, d)})
    shapes["vocab"] = (config.vocab_size, e)
    return shapes


@dataclass
class EncoderPack:
    """Encoder weights, vocabulary table and words."""

    config: EncoderConfig
    weights: Dict[str, Tensor]
    vocab_words: List[str]
    frozen: bool = False
    _index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        missing = sorted(set(shapes) - set(self.weights))
        if missing:
            raise ShapeError(f"pack is missing tensors: {', '.join(missing)}")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise ShapeError(f"tensor {name!r} has shape {self.weights[name].shape}, expected {shape}")
        if len(self.vocab_words) != self.config.vocab_size:
            raise ShapeError(f"{len(self.vocab_words)} vocabulary words for vocab_size {self.config.vocab_size}")
        self._index = {w: i for i, w in enumerate(self.vocab_words)}
        if self.frozen:
            self.freeze()

    @property
    def vocab_table(self) -> Tensor:
        return self.weights["vocab"]

    @property
    def vision_weights(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.weights.items() if k.startswith("vision.")}

    @property
    def text_weights(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.weights.items() if k.startswith("text.")}

    def word_id(self, word: str) -> Optional[int]:
        return self._index.get(word)

    def freeze(self) -> "EncoderPack":
        for t in self.weights.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def unfreeze_for_training(self) -> List[Tensor]:
        if self.frozen:
            raise RuntimeError("pack is frozen; its weights cannot be trained")
        for t in self.weights.values():
            t.requires_grad = True
        return list(self.weights.values())

    def copy(self) -> "EncoderPack":
        weights = {k: Tensor(v.data) for k, v in self.weights.items()}
        return EncoderPack(self.config, weights, list(self.vocab_words), frozen=self.frozen)

    def equals(self, other: "EncoderPack") -> bool:
        return (self.config == other.config and self.vocab_words == other.vocab_words
                and self.weights.keys() == other.weights.keys()
                and all(np.array_equal(v.data, other.weights[k].data) for k, v in self.weights.items()))


@dataclass
class TokenSequence:
    """``m`` content vectors plus where each came from."""

    embeddings: Tensor
    provenance: List[str]
    token_ids: List[int]

    def __post_init__(self):
        if len(self.provenance) != self.embeddings.shape[0] or len(self.token_ids) != len(self.provenance):
            raise ShapeError("provenance and token ids must cover every position")


def init_pack(config: EncoderConfig, seed: int, vocab_words: Optional[Sequence[str]] = None) -> EncoderPack:
    """
    Seeded initialization: normal(0, 0.02) for embeddings and linear maps,
    unit layer-norm gains, zero biases, attention output projections set to
    identity / sqrt(depth).
    """
    words = list(vocab_words) if vocab_words is not None else default_vocabulary()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        elif leaf == "wo":
            depth = config.depth_v if name.startswith("vision.") else config.depth_t
            arr = np.eye(shape[0]) / math.sqrt(depth)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        weights[name] = Tensor(arr)
    return EncoderPack(config, weights, words, frozen=False)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _transformer_block(x: Tensor, w: Dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, m, e = x.shape
    dh = e // heads
    h = nc.layer_norm(x, w[prefix + "ln1.g"], w[prefix + "ln1.b"])

    def split(t):
        return t.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ w[prefix + "attn.wq"])
    k = split(h @ w[prefix + "attn.wk"])
    v = split(h @ w[prefix + "attn.wv"])
    o = nc.attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, m, e)
    x = x + o @ w[prefix + "attn.wo"]
    h = nc.layer_norm(x, w[prefix + "ln2.g"], w[prefix + "ln2.b"])
    h = nc.gelu(h @ w[prefix + "mlp.w1"] + w[prefix + "mlp.b1"])
    return x + (h @ w[prefix + "mlp.w2"] + w[prefix + "mlp.b2"])


def patchify(config: EncoderConfig, images: np.ndarray) -> np.ndarray:
    """``(N, w, h, 3)`` pixels to ``(N, patches, patch*patch*3)``."""
    n = images.shape[0]
    p = config.patch_size
    gw, gh = config.image_width // p, config.image_height // p
    x = images.reshape(n, gw, p, gh, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gw * gh, p * p * 3)


def _check_images(config: EncoderConfig, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=nc.get_default_dtype())
    if images.ndim == 3:
        images = images[None]
    expected = (config.image_width, config.image_height, 3)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"image shape {images.shape[1:]} does not match {expected}")
    if not np.isfinite(images).all():
        raise ValueError("image contains NaN or Inf")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return images


def encode_images(pack: EncoderPack, images) -> Tensor:
    """Batch of ``(N, w, h, 3)`` images to unit-norm features ``(N, d)``."""
    cfg, w = pack.config, pack.weights
    patches = nc.constant(patchify(cfg, _check_images(cfg, images)))
    x = patches @ w["vision.patch.w"] + w["vision.patch.b"] + w["vision.pos"]
    for i in range(cfg.depth_v):
        x = _transformer_block(x, w, f"vision.blocks.{i}.", cfg.heads)
    x = nc.layer_norm(x, w["vision.ln_f.g"], w["vision.ln_f.b"])
    return nc.l2_normalize(nc.mean(x, axis=1) @ w["vision.proj"])


def encode_image(pack: EncoderPack, image) -> Tensor:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a single (w, h, 3) image, got shape {image.shape}")
    return encode_images(pack, image).reshape(pack.config.latent_dim)


def encode_sequences(pack: EncoderPack, sequences: Tensor) -> Tensor:
    """Embedding sequences ``(n, m, d_e)`` to unit-norm features ``(n, d)``."""
    cfg, w = pack.config, pack.weights
    expected = (cfg.text_len, cfg.embed_dim)
    if sequences.ndim != 3 or sequences.shape[1:] != expected:
        raise ShapeError(f"sequence shape {sequences.shape[1:]} does not match {expected}")
    x = sequences + w["text.pos"]
    for i in range(cfg.depth_t):
        x = _transformer_block(x, w, f"text.blocks.{i}.", cfg.heads)
    x = nc.layer_norm(x, w["text.ln_f.g"], w["text.ln_f.b"])
    return nc.l2_normalize(nc.take(x, cfg.text_len - 1, axis=1) @ w["text.proj"])


def encode_text(pack: EncoderPack, seq: TokenSequence) -> Tensor:
    emb = seq.embeddings
    return encode_sequences(pack, emb.reshape(1, *emb.shape)).reshape(pack.config.latent_dim)


def encode_texts(pack: EncoderPack, texts: Sequence[str]) -> Tensor:
    seqs = [tokenize(pack, t) for t in texts]
    return encode_sequences(pack, nc.stack([s.embeddings for s in seqs]))


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)?")


def split_words(text: str) -> List[str]:
    return _WORD_RE.findall(text.lower())


def token_ids(pack: EncoderPack, text: str) -> List[int]:
    """Vocabulary rows for ``text`` without padding or truncation."""
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    return [pack._index.get(w, UNK) for w in split_words(text)]


def tokenize(pack: EncoderPack, text: str) -> TokenSequence:
    ids = token_ids(pack, text)[: pack.config.text_len]
    prov = [UNKNOWN if i == UNK else WORD for i in ids]
    pad = pack.config.text_len - len(ids)
    ids += [PAD] * pad
    prov += [PADDING] * pad
    return TokenSequence(nc.gather_rows(pack.vocab_table, ids), prov, ids)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_pack(pack: EncoderPack, path) -> None:
    meta = pack.config.to_meta()
    meta["frozen"] = "1" if pack.frozen else "0"
    meta["vocab_words"] = " ".join(pack.vocab_words)
    records.write(path, PACK_MAGIC, meta, {k: v.data for k, v in pack.weights.items()})


def load_pack(path, expected_config: Optional[EncoderConfig] = None) -> EncoderPack:
    """
    Read a pack; the result is always frozen.

    With ``expected_config`` every tensor is checked against the shapes that
    config implies and the first mismatch is reported by name.
    """
    meta, tensors = records.read(path, PACK_MAGIC)
    config = EncoderConfig.from_meta(meta)
    if expected_config is not None:
        for name, shape in expected_shapes(expected_config).items():
            if name not in tensors:
                raise ShapeError(f"pack has no tensor {name!r}")
            if tensors[name].shape != shape:
                raise ShapeError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                 f"expected {shape} for the requested config")
    words = meta["vocab_words"].split(" ")
    weights = {k: Tensor(v) for k, v in tensors.items()}
    return EncoderPack(config, weights, words, frozen=True)
