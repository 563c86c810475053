"""
Inference heads over the frozen dual encoder.

All heads start from unit-norm image features. Retrieval heads (zero-shot,
prompt ensemble, CoOp, target optimization) score an image against one text
feature per class and divide by the temperature. The decomposed-query head
("defo") scores against ``n`` free text queries and maps the n similarities
to ``k`` logits with a linear layer. The linear probe ignores text entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .encoders import (PAD, EncoderPack, encode_images, encode_sequences, token_ids)
from .numcore import ShapeError, Tensor

VARIANTS = ("zero-shot", "ensemble", "linear-probe", "coop", "target-opt", "defo")
TRAINABLE_VARIANTS = ("linear-probe", "coop", "target-opt", "defo")
DEFO_INITS = ("random", "class-name", "prompt")
INIT_STD = 0.02


class ProtocolError(ValueError):
    """Protocol configuration or state is inconsistent."""


@dataclass
class ProtocolConfig:
    class_names: List[str]
    variant: str = "defo"
    tau: float = 0.07
    templates: Tuple[str, ...] = ("a photo of a {}",)
    coop_prefix_len: int = 4
    coop_init: str = "template"
    coop_shared: bool = True
    target_name_len: int = 2
    target_init: str = "class-name"
    n_queries: int = 32
    defo_init: str = "random"
    defo_prefix_len: int = 4
    identity_block: bool = False
    freeze_queries: bool = False
    head_bias: bool = False
    logit_scale: Optional[float] = None
    probe_bias: bool = True

    def __post_init__(self):
        self.class_names = list(self.class_names)
        self.templates = tuple(self.templates)
        errors = self.validate()
        if errors:
            raise ProtocolError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        if not self.class_names:
            errors.append("class_names must not be empty")
        if not self.tau > 0:
            errors.append("tau must be positive")
        if not self.templates or any(t.count("{}") != 1 for t in self.templates):
            errors.append("every template needs exactly one '{}' placeholder")
        if self.n_queries < 1:
            errors.append("n_queries must be >= 1")
        if self.coop_prefix_len < 1 or self.target_name_len < 1 or self.defo_prefix_len < 0:
            errors.append("prefix and name lengths must be positive")
        if self.coop_init not in ("template", "random"):
            errors.append("coop_init must be template or random")
        if self.target_init not in ("class-name", "random"):
            errors.append("target_init must be class-name or random")
        if self.defo_init not in DEFO_INITS:
            errors.append(f"defo_init must be one of {', '.join(DEFO_INITS)}")
        if self.logit_scale is not None and not self.logit_scale > 0:
            errors.append("logit_scale must be positive")
        return errors

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def scale(self) -> float:
        return 1.0 / self.tau if self.logit_scale is None else self.logit_scale

    def prompts(self, template: Optional[str] = None) -> List[str]:
        template = template or self.templates[0]
        return [template.replace("{}", name) for name in self.class_names]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class Param:
    """A tensor plus the boolean mask of entries an optimizer may change."""

    name: str
    tensor: Tensor
    trainable: np.ndarray

    @property
    def n_trainable(self) -> int:
        return int(self.trainable.sum())


@dataclass
class QueryBank:
    """
    ``n`` text queries of ``m`` embedding slots.

    ``values`` is the trainable tensor: ``(n, m, d_e)``, or ``(m, d_e)`` when
    one context is shared by every query. ``fixed`` holds the vocabulary or
    pad embeddings used where ``mask`` is False; ``token_ids`` records their
    vocabulary rows (-1 at trainable slots).
    """

    values: Tensor
    fixed: np.ndarray
    mask: np.ndarray
    token_ids: np.ndarray
    shared: bool = False
    frozen: bool = False

    def __post_init__(self):
        n, m, e = self.fixed.shape
        self.mask = np.asarray(self.mask, dtype=bool)
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.mask.shape != (n, m) or self.token_ids.shape != (n, m):
            raise ShapeError("mask and token_ids must be (n, m)")
        expected = (m, e) if self.shared else (n, m, e)
        if self.values.shape != expected:
            raise ShapeError(f"query values have shape {self.values.shape}, expected {expected}")
        if self.shared and not (self.mask == self.mask[0]).all():
            raise ShapeError("a shared context needs the same trainable slots in every query")
        if self.frozen or not self.mask.any():
            self.values.requires_grad = False

    @property
    def n(self) -> int:
        return self.fixed.shape[0]

    @property
    def m(self) -> int:
        return self.fixed.shape[1]

    def assemble(self) -> Tensor:
        """The ``(n, m, d_e)`` input sequences fed to the text encoder."""
        if not self.mask.any():
            return nc.constant(self.fixed)
        values = self.values.reshape(1, *self.values.shape) if self.shared else self.values
        return nc.where(self.mask[:, :, None], values, nc.constant(self.fixed))

    def fixed_positions(self) -> np.ndarray:
        """Per query, the number of fixed (non-trainable) positions."""
        return (~self.mask).sum(axis=1)

    def parameters(self) -> List[Param]:
        if self.frozen or not self.mask.any():
            return []
        if self.shared:
            trainable = np.broadcast_to(self.mask[0][:, None], self.values.shape).copy()
        else:
            trainable = np.broadcast_to(self.mask[:, :, None], self.values.shape).copy()
        return [Param("bank.values", self.values, trainable)]

    def state(self) -> Dict[str, np.ndarray]:
        return {
            "bank.values": self.values.data,
            "bank.fixed": self.fixed,
            "bank.mask": self.mask.astype(np.float64),
            "bank.token_ids": self.token_ids.astype(np.float64),
            "bank.flags": np.array([float(self.shared), float(self.frozen)]),
        }

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "QueryBank":
        shared, frozen = (bool(x) for x in state["bank.flags"])
        return cls(Tensor(state["bank.values"], requires_grad=not frozen), state["bank.fixed"].copy(),
                   state["bank.mask"] > 0.5, state["bank.token_ids"].astype(np.int64), shared, frozen)


@dataclass
class ClassifierHead:
    """Linear map from ``n`` similarities to ``k`` logits; no bias by default."""

    W: Tensor
    frozen_mask: np.ndarray
    logit_scale: float
    bias: Optional[Tensor] = None

    def __post_init__(self):
        self.frozen_mask = np.asarray(self.frozen_mask, dtype=bool)
        if self.frozen_mask.shape != self.W.shape:
            raise ShapeError("frozen_mask must match W")
        if not self.logit_scale > 0:
            raise ProtocolError("logit_scale must be positive")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> List[Param]:
        params = []
        if (~self.frozen_mask).any():
            params.append(Param("head.W", self.W, ~self.frozen_mask))
        if self.bias is not None:
            params.append(Param("head.bias", self.bias, np.ones(self.bias.shape, dtype=bool)))
        return params

    def logits(self, similarities: Tensor) -> Tensor:
        out = (similarities * self.logit_scale) @ self.W
        return out if self.bias is None else out + self.bias

    def state(self) -> Dict[str, np.ndarray]:
        out = {"head.W": self.W.data, "head.frozen_mask": self.frozen_mask.astype(np.float64),
               "head.logit_scale": np.array([self.logit_scale])}
        if self.bias is not None:
            out["head.bias"] = self.bias.data
        return out

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "ClassifierHead":
        bias = Tensor(state["head.bias"], requires_grad=True) if "head.bias" in state else None
        return cls(Tensor(state["head.W"], requires_grad=True), state["head.frozen_mask"] > 0.5,
                   float(state["head.logit_scale"][0]), bias)


@dataclass
class LinearProbe:
    W: Tensor
    b: Optional[Tensor] = None

    def parameters(self) -> List[Param]:
        params = [Param("probe.W", self.W, np.ones(self.W.shape, dtype=bool))]
        if self.b is not None:
            params.append(Param("probe.b", self.b, np.ones(self.b.shape, dtype=bool)))
        return params

    def logits(self, image_features: Tensor) -> Tensor:
        if image_features.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"features of size {image_features.shape[-1]} for probe {self.W.shape}")
        out = image_features @ self.W
        return out if self.b is None else out + self.b

    def state(self) -> Dict[str, np.ndarray]:
        out = {"probe.W": self.W.data}
        if self.b is not None:
            out["probe.b"] = self.b.data
        return out

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "LinearProbe":
        b = Tensor(state["probe.b"], requires_grad=True) if "probe.b" in state else None
        return cls(Tensor(state["probe.W"], requires_grad=True), b)


@dataclass
class Prediction:
    probabilities: np.ndarray
    top5: List[Tuple[int, float]]
    predicted: int

    @classmethod
    def from_probabilities(cls, probs) -> "Prediction":
        probs = np.asarray(probs, dtype=np.float64)
        order = np.argsort(-probs, kind="stable")[:5]
        return cls(probs, [(int(i), float(probs[i])) for i in order], int(order[0]))


# ---------------------------------------------------------------------------
# shared backbone
# ---------------------------------------------------------------------------

def similarity_vector(f_image, bank_features) -> Tensor:
    """Dot products between one image feature ``(d,)`` and ``n`` text features."""
    f = nc.constant(f_image)
    t = nc.stack(list(bank_features)) if isinstance(bank_features, (list, tuple)) else nc.constant(bank_features)
    if f.ndim != 1 or t.ndim != 2 or t.shape[1] != f.shape[0]:
        raise ShapeError(f"image feature {f.shape} vs text features {t.shape}")
    return (t @ f.reshape(f.shape[0], 1)).reshape(t.shape[0])


def similarities(image_features: Tensor, text_features: Tensor) -> Tensor:
    """``(B, d) x (n, d) -> (B, n)``."""
    if image_features.shape[-1] != text_features.shape[-1]:
        raise ShapeError(f"image features {image_features.shape} vs text features {text_features.shape}")
    return image_features @ text_features.transpose(1, 0)


def retrieval_logits(image_features: Tensor, class_features: Tensor, tau: float) -> Tensor:
    return similarities(image_features, class_features) * (1.0 / tau)


def image_features(pack: EncoderPack, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    with nc.no_grad():
        chunks = [encode_images(pack, images[i:i + batch_size]).data
                  for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def prompt_features(pack: EncoderPack, config: ProtocolConfig, templates: Sequence[str]) -> Tensor:
    """Per-class text features averaged over ``templates`` then renormalized."""
    seqs = [token_sequence(pack, p) for t in templates for p in config.prompts(t)]
    feats = encode_sequences(pack, nc.constant(np.stack(seqs)))
    k, d = config.k, pack.config.latent_dim
    return nc.l2_normalize(nc.mean(feats.reshape(len(templates), k, d), axis=0))


def token_sequence(pack: EncoderPack, text: str) -> np.ndarray:
    ids = token_ids(pack, text)[: pack.config.text_len]
    ids += [PAD] * (pack.config.text_len - len(ids))
    return pack.vocab_table.data[ids]


def _split_template(pack: EncoderPack, template: str) -> Tuple[List[int], List[int]]:
    before, _, after = template.partition("{}")
    pre = token_ids(pack, before) if before.strip() else []
    post = token_ids(pack, after) if after.strip() else []
    return pre, post


# ---------------------------------------------------------------------------
# query-bank builders
# ---------------------------------------------------------------------------

def _empty_bank_arrays(pack: EncoderPack, n: int):
    m, e = pack.config.text_len, pack.config.embed_dim
    fixed = np.broadcast_to(pack.vocab_table.data[PAD], (n, m, e)).copy()
    mask = np.zeros((n, m), dtype=bool)
    ids = np.full((n, m), PAD, dtype=np.int64)
    return fixed, mask, ids


def _place(pack, fixed, ids, row, start, tokens):
    for j, tok in enumerate(tokens):
        fixed[row, start + j] = pack.vocab_table.data[tok]
        ids[row, start + j] = tok


def prompt_bank(pack: EncoderPack, config: ProtocolConfig, template: Optional[str] = None) -> QueryBank:
    """The zero-shot prompts as a bank with no trainable slot."""
    n = config.k
    fixed, mask, ids = _empty_bank_arrays(pack, n)
    for i, text in enumerate(config.prompts(template)):
        toks = token_ids(pack, text)[: pack.config.text_len]
        _place(pack, fixed, ids, i, 0, toks)
    return QueryBank(Tensor(fixed), fixed, mask, ids, frozen=True)


def build_query_bank(config: ProtocolConfig, pack: EncoderPack, init_mode: str, seed: int,
                     n: Optional[int] = None) -> QueryBank:
    """
    Trainable bank of ``n`` queries (``config.n_queries`` by default).

    ``random``: every slot of every query trainable, drawn from
    normal(0, 0.02). ``class-name``: query i < k is ``defo_prefix_len``
    random slots, then the fixed tokens of class name i, then fixed pads;
    queries k..n-1 are fully random. ``prompt``: query i < k is the fixed
    zero-shot prompt of class i; the rest are fully random.
    """
    n = config.n_queries if n is None else n
    m, e = pack.config.text_len, pack.config.embed_dim
    rng = np.random.default_rng(seed)
    fixed, mask, ids = _empty_bank_arrays(pack, n)
    values = rng.normal(0.0, INIT_STD, size=(n, m, e))
    if init_mode == "random":
        mask[:] = True
    elif init_mode == "class-name":
        if n < config.k:
            raise ProtocolError(f"class-name seeding needs n >= k ({n} < {config.k})")
        mask[config.k:] = True
        p = config.defo_prefix_len
        for i, name in enumerate(config.class_names):
            toks = token_ids(pack, name)
            if p + len(toks) > m:
                raise ProtocolError(f"class name {name!r} does not fit after a {p}-slot prefix")
            mask[i, :p] = True
            _place(pack, fixed, ids, i, p, toks)
    elif init_mode == "prompt":
        if n < config.k:
            raise ProtocolError(f"prompt seeding needs n >= k ({n} < {config.k})")
        mask[config.k:] = True
        for i, text in enumerate(config.prompts()):
            _place(pack, fixed, ids, i, 0, token_ids(pack, text)[:m])
    else:
        raise ProtocolError(f"unknown init mode {init_mode!r}")
    values = np.where(mask[:, :, None], values, fixed)
    ids[mask] = -1
    return QueryBank(Tensor(values, requires_grad=True), fixed, mask, ids,
                     frozen=config.freeze_queries)


def build_coop_bank(config: ProtocolConfig, pack: EncoderPack, seed: int) -> QueryBank:
    """Context slots followed by the fixed class-name tokens, then pads."""
    L, m, e = config.coop_prefix_len, pack.config.text_len, pack.config.embed_dim
    k = config.k
    fixed, mask, ids = _empty_bank_arrays(pack, k)
    for i, name in enumerate(config.class_names):
        toks = token_ids(pack, name)
        if len(toks) > m - L:
            raise ProtocolError(f"class name {name!r} needs {len(toks)} tokens; only {m - L} fit after "
                                f"a {L}-slot context")
        _place(pack, fixed, ids, i, L, toks)
    mask[:, :L] = True
    ids[mask] = -1
    rng = np.random.default_rng(seed)
    if config.coop_init == "template":
        pre, _ = _split_template(pack, config.templates[0])
        ctx_ids = (pre + [PAD] * L)[:L]
        ctx = pack.vocab_table.data[ctx_ids]
    else:
        ctx = rng.normal(0.0, INIT_STD, size=(L, e))
    if config.coop_shared:
        values = np.broadcast_to(pack.vocab_table.data[PAD], (m, e)).copy()
        values[:L] = ctx
    else:
        values = fixed.copy()
        values[:, :L] = ctx
    return QueryBank(Tensor(values, requires_grad=True), fixed, mask, ids, shared=config.coop_shared)


def build_target_bank(config: ProtocolConfig, pack: EncoderPack, seed: int) -> QueryBank:
    """Fixed template tokens around ``target_name_len`` per-class trainable slots."""
    m, e = pack.config.text_len, pack.config.embed_dim
    t = config.target_name_len
    pre, post = _split_template(pack, config.templates[0])
    if len(pre) + t + len(post) > m:
        raise ProtocolError(f"template plus {t} name slots exceeds {m} positions")
    k = config.k
    fixed, mask, ids = _empty_bank_arrays(pack, k)
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, INIT_STD, size=(k, m, e))
    for i, name in enumerate(config.class_names):
        _place(pack, fixed, ids, i, 0, pre)
        _place(pack, fixed, ids, i, len(pre) + t, post)
        if config.target_init == "class-name":
            toks = token_ids(pack, name)
            if len(toks) > t:
                raise ProtocolError(f"class name {name!r} has more than {t} tokens")
            name_ids = toks + [PAD] * (t - len(toks))
            values[i, len(pre):len(pre) + t] = pack.vocab_table.data[name_ids]
    mask[:, len(pre):len(pre) + t] = True
    values = np.where(mask[:, :, None], values, fixed)
    ids[mask] = -1
    return QueryBank(Tensor(values, requires_grad=True), fixed, mask, ids)


def build_head(config: ProtocolConfig, n: int, seed: int) -> ClassifierHead:
    """
    ``n x k`` head. With ``identity_block`` the top ``k x k`` block is a frozen
    identity and the remaining rows start at zero, so the untrained head
    reproduces retrieval over the first ``k`` queries.
    """
    k = config.k
    rng = np.random.default_rng(seed)
    frozen = np.zeros((n, k), dtype=bool)
    if config.identity_block:
        if n < k:
            raise ProtocolError(f"identity block needs n >= k ({n} < {k})")
        W = np.zeros((n, k))
        W[:k] = np.eye(k)
        frozen[:k] = True
    else:
        W = rng.normal(0.0, INIT_STD, size=(n, k))
    bias = Tensor(np.zeros(k), requires_grad=True) if config.head_bias else None
    return ClassifierHead(Tensor(W, requires_grad=True), frozen, config.scale, bias)


def build_probe(config: ProtocolConfig, latent_dim: int, seed: int) -> LinearProbe:
    rng = np.random.default_rng(seed)
    W = Tensor(rng.normal(0.0, INIT_STD, size=(latent_dim, config.k)), requires_grad=True)
    b = Tensor(np.zeros(config.k), requires_grad=True) if config.probe_bias else None
    return LinearProbe(W, b)


# ---------------------------------------------------------------------------
# protocol state
# ---------------------------------------------------------------------------

@dataclass
class ProtocolState:
    """Everything one head needs: frozen pack, config and its parameters."""

    pack: EncoderPack
    config: ProtocolConfig
    bank: Optional[QueryBank] = None
    head: Optional[ClassifierHead] = None
    probe: Optional[LinearProbe] = None
    _class_features: Optional[Tensor] = field(default=None, repr=False)

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameters(self) -> List[Param]:
        params = []
        for part in (self.bank, self.head, self.probe):
            if part is not None:
                params += part.parameters()
        return params

    def text_features(self) -> Optional[Tensor]:
        v = self.variant
        if v == "linear-probe":
            return None
        if v in ("zero-shot", "ensemble"):
            if self._class_features is None:
                with nc.no_grad():
                    templates = self.config.templates if v == "ensemble" else self.config.templates[:1]
                    self._class_features = prompt_features(self.pack, self.config, templates)
            return self._class_features
        return encode_sequences(self.pack, self.bank.assemble())

    def logits(self, image_features, text_features: Optional[Tensor] = None) -> Tensor:
        """``(B, d)`` image features to ``(B, k)`` logits."""
        f = nc.constant(image_features)
        if self.variant == "linear-probe":
            return self.probe.logits(f)
        t = self.text_features() if text_features is None else text_features
        if self.variant == "defo":
            if self.head.n != t.shape[0]:
                raise ShapeError(f"head expects {self.head.n} queries, bank has {t.shape[0]}")
            return self.head.logits(similarities(f, t))
        return retrieval_logits(f, t, self.config.tau)

    def probabilities_from_features(self, feats: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return nc.softmax(self.logits(feats)).data

    def probabilities(self, images) -> np.ndarray:
        return self.probabilities_from_features(image_features(self.pack, images))

    def predict(self, image) -> Prediction:
        return Prediction.from_probabilities(self.probabilities(image)[0])

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for part in (self.bank, self.head, self.probe):
            if part is not None:
                out.update(part.state())
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        if "bank.values" in state:
            self.bank = QueryBank.from_state(state)
        if "head.W" in state:
            self.head = ClassifierHead.from_state(state)
        if "probe.W" in state:
            self.probe = LinearProbe.from_state(state)


def build_protocol(pack: EncoderPack, config: ProtocolConfig, seed: int = 0) -> ProtocolState:
    """Initialize the parameters the configured variant needs."""
    v = config.variant
    state = ProtocolState(pack, config)
    if v == "ensemble" and len(config.templates) < 2:
        raise ProtocolError("prompt ensembling needs at least 2 templates")
    if v == "linear-probe":
        state.probe = build_probe(config, pack.config.latent_dim, seed)
    elif v == "coop":
        state.bank = build_coop_bank(config, pack, seed)
    elif v == "target-opt":
        state.bank = build_target_bank(config, pack, seed)
    elif v == "defo":
        rng = np.random.default_rng(seed)
        bank_seed, head_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
        state.bank = build_query_bank(config, pack, config.defo_init, bank_seed)
        state.head = build_head(config, state.bank.n, head_seed)
    return state


# ---------------------------------------------------------------------------
# single-image predictions
# ---------------------------------------------------------------------------

def zero_shot_predict(pack: EncoderPack, config: ProtocolConfig, image) -> Prediction:
    return ProtocolState(pack, replace(config, variant="zero-shot")).predict(image)


def ensemble_predict(pack: EncoderPack, config: ProtocolConfig, image) -> Prediction:
    if len(config.templates) < 2:
        raise ProtocolError("prompt ensembling needs at least 2 templates")
    return ProtocolState(pack, replace(config, variant="ensemble")).predict(image)


def linear_probe_predict(pack: EncoderPack, probe: LinearProbe, image) -> Prediction:
    feats = nc.constant(image_features(pack, image))
    with nc.no_grad():
        return Prediction.from_probabilities(nc.softmax(probe.logits(feats)).data[0])


def coop_predict(pack: EncoderPack, config: ProtocolConfig, bank: QueryBank, image) -> Prediction:
    if bank.n != config.k:
        raise ProtocolError("CoOp needs one query per class")
    return ProtocolState(pack, replace(config, variant="coop"), bank=bank).predict(image)


def target_opt_predict(pack: EncoderPack, config: ProtocolConfig, bank: QueryBank, image) -> Prediction:
    if bank.n != config.k:
        raise ProtocolError("target optimization needs one query per class")
    return ProtocolState(pack, replace(config, variant="target-opt"), bank=bank).predict(image)


def defo_predict(pack: EncoderPack, config: ProtocolConfig, bank: QueryBank, head: ClassifierHead,
                 image) -> Prediction:
    if head.n != bank.n:
        raise ShapeError(f"head has {head.n} rows but the bank has {bank.n} queries")
    return ProtocolState(pack, replace(config, variant="defo"), bank=bank, head=head).predict(image)


def clip_plus_linear_predict(pack: EncoderPack, config: ProtocolConfig, head: ClassifierHead,
                             image) -> Prediction:
    """Decomposed-query head with the zero-shot prompts as a fixed bank."""
    return defo_predict(pack, config, prompt_bank(pack, config), head, image)
