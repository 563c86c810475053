"""
Training loops.

``train_protocol`` fits the trainable parameters of a protocol head with
mini-batch cross-entropy and SGD (momentum, coupled weight decay). The
encoder stays frozen, so image features are computed once per run unless
augmentation is on. ``contrastive_pretrain`` is the only routine that
updates encoder weights; it aligns the two towers on image/caption pairs
using Adam, since plain SGD stalls on the randomly initialized transformer.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numcore as nc
from .datastore import Checkpoint, DataError, Dataset
from .encoders import PAD, EncoderPack, encode_images, encode_sequences, token_ids
from .protocols import Param, ProtocolState, image_features

log = logging.getLogger(__name__)

ALLOWED_SHOTS = (1, 2, 4, 8, 16)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 0.01
    epochs: int = 50
    seed: int = 0
    shots: Optional[int] = None
    augment: bool = False
    lr_schedule: str = "constant"

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.learning_rate < 0:
            errors.append("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay must be non-negative")
        if self.epochs < 0:
            errors.append("epochs must be non-negative")
        if self.shots is not None and self.shots not in ALLOWED_SHOTS:
            errors.append(f"shots must be one of {ALLOWED_SHOTS}")
        if self.lr_schedule not in ("constant", "cosine"):
            errors.append("lr_schedule must be constant or cosine")
        return errors

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


@dataclass
class OptimizerState:
    """Momentum buffers, one flat vector over the trainable entries of each param."""

    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named stream derived from one experiment seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def sgd_step(params: Sequence[Param], grads: Sequence[Optional[np.ndarray]], state: OptimizerState,
             config: TrainConfig, lr: Optional[float] = None) -> None:
    """
    ``v <- momentum * v + grad + weight_decay * param``, ``param <- param - lr * v``,
    applied only where ``param.trainable`` holds.
    """
    lr = config.learning_rate if lr is None else lr
    for p, g in zip(params, grads):
        if g is None:
            raise TrainingError(f"trainable parameter {p.name!r} has no gradient")
        sel = p.trainable
        data = p.tensor.data
        w = data[sel]
        v = state.velocities.get(p.name)
        if v is None:
            v = np.zeros_like(w)
        v = config.momentum * v + g[sel] + config.weight_decay * w
        state.velocities[p.name] = v
        data[sel] = w - lr * v
    state.step += 1


def sample_few_shot(dataset: Dataset, shots: int, seed: int) -> Dataset:
    """``shots`` examples per class, uniformly without replacement."""
    rng = np.random.default_rng(seed)
    picked = []
    for c, name in enumerate(dataset.class_names):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < shots:
            raise DataError(f"class {name!r} has {len(idx)} examples, fewer than {shots} shots")
        picked.append(np.sort(rng.choice(idx, size=shots, replace=False)))
    return dataset.subset(np.concatenate(picked))


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random crop after reflect padding, then horizontal flip with p = 0.5."""
    n, w, h, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        x0, y0 = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[i, x0:x0 + w, y0:y0 + h]
        out[i] = crop[::-1] if rng.random() < 0.5 else crop
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float


@dataclass
class TrainingReport:
    records: List[EpochRecord]
    checkpoint: Checkpoint

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]


def _restore_rng(rng: np.random.Generator, state: Dict) -> None:
    rng.bit_generator.state = state


def make_checkpoint(state: ProtocolState, opt: OptimizerState, epoch: int, rngs: Dict[str, np.random.Generator],
                    digest: str) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float64) for k, v in state.state().items()}
    for name, v in opt.velocities.items():
        tensors[f"opt.{name}"] = v.copy()
    return Checkpoint(state.variant, tensors, opt.step, epoch, digest,
                      {k: r.bit_generator.state for k, r in rngs.items()})


def train_protocol(state: ProtocolState, dataset: Dataset, config: TrainConfig,
                   resume: Optional[Checkpoint] = None, stop_epoch: Optional[int] = None,
                   digest: str = "", on_epoch: Optional[Callable[[EpochRecord], None]] = None,
                   ) -> TrainingReport:
    """
    Run ``config.epochs`` epochs of mini-batch SGD on the protocol parameters.

    ``resume`` continues from a checkpoint written by an earlier call;
    ``stop_epoch`` ends early at an epoch boundary so a run can be split.
    Everything random comes from named streams of ``config.seed``.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    rngs = {"data": rng_stream(config.seed, "data"), "augment": rng_stream(config.seed, "augment")}
    opt = OptimizerState()
    start = 0
    if resume is not None:
        if resume.variant != state.variant:
            raise DataError(f"checkpoint is for {resume.variant!r}, not {state.variant!r}")
        state.load_state(resume.tensors)
        opt.velocities = {k[4:]: v.copy() for k, v in resume.tensors.items() if k.startswith("opt.")}
        opt.step = resume.step
        start = resume.epoch
        for name, rng in rngs.items():
            _restore_rng(rng, resume.rng_state[name])
    params = state.parameters()
    if not params or all(p.n_trainable == 0 for p in params):
        raise TrainingError(f"protocol {state.variant!r} has no trainable parameters")

    labels = dataset.labels
    n = len(dataset)
    clean_feats = image_features(state.pack, dataset.images)
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    history = []
    for epoch in range(start, end):
        lr = config.lr_at(epoch)
        order = rngs["data"].permutation(n)
        losses = []
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            if config.augment:
                feats = image_features(state.pack, augment_batch(dataset.images[idx], rngs["augment"]))
            else:
                feats = clean_feats[idx]
            for p in params:
                p.tensor.grad = None
            loss = nc.cross_entropy(state.logits(feats), labels[idx])
            nc.backward(loss)
            sgd_step(params, [p.tensor.grad for p in params], opt, config, lr)
            losses.append(loss.item())
        for p in params:
            p.tensor.grad = None
        probs = state.probabilities_from_features(clean_feats)
        acc = float(np.mean(np.argmax(probs, axis=1) == labels))
        record = EpochRecord(epoch + 1, float(np.mean(losses)), acc)
        history.append(record)
        log.debug("epoch %d loss %.6f train-acc %.4f", record.epoch, record.loss, record.train_acc)
        if on_epoch is not None:
            on_epoch(record)
    return TrainingReport(history, make_checkpoint(state, opt, max(end, start), rngs, digest))


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.07
    seed: int = 0
    lr_schedule: str = "cosine"

    def validate(self) -> List[str]:
        errors = []
        if self.batch_size < 2:
            errors.append("pretraining batch_size must be >= 2")
        if self.epochs < 0 or self.learning_rate < 0:
            errors.append("pretraining epochs and learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append("pretraining betas must lie in [0, 1)")
        if not self.tau > 0:
            errors.append("pretraining tau must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            errors.append("pretraining lr_schedule must be constant or cosine")
        return errors

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "cosine" and total > 0:
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / total))
        return self.learning_rate


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, weights: Sequence[nc.Tensor]) -> "AdamState":
        return cls([np.zeros_like(w.data) for w in weights], [np.zeros_like(w.data) for w in weights])

    def step(self, weights: Sequence[nc.Tensor], config: PretrainConfig, lr: float) -> None:
        self.t += 1
        b1, b2 = config.beta1, config.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for w, m, v in zip(weights, self.m, self.v):
            g = w.grad
            if g is None:
                raise TrainingError("an encoder weight received no gradient")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def caption_ids(pack: EncoderPack, captions: Sequence[str]) -> np.ndarray:
    m = pack.config.text_len
    rows = []
    for c in captions:
        ids = token_ids(pack, c)[:m]
        rows.append(ids + [PAD] * (m - len(ids)))
    return np.asarray(rows, dtype=np.int64)


def contrastive_loss(image_feats: nc.Tensor, text_feats: nc.Tensor, tau: float) -> nc.Tensor:
    """Mean of image-to-text and text-to-image cross-entropy over ``sim / tau``."""
    b = image_feats.shape[0]
    if b < 2:
        raise TrainingError("contrastive loss needs a batch of at least 2 pairs")
    logits = (image_feats @ text_feats.transpose(1, 0)) * (1.0 / tau)
    target = np.arange(b)
    return (nc.cross_entropy(logits, target) + nc.cross_entropy(logits.transpose(1, 0), target)) * 0.5


def pair_loss(pack: EncoderPack, images: np.ndarray, ids: np.ndarray, tau: float) -> nc.Tensor:
    f_img = encode_images(pack, images)
    f_txt = encode_sequences(pack, nc.gather_rows(pack.vocab_table, ids))
    return contrastive_loss(f_img, f_txt, tau)


def contrastive_pretrain(pack: EncoderPack, images: np.ndarray, captions: Sequence[str],
                         config: PretrainConfig,
                         on_epoch: Optional[Callable[[int, float], None]] = None) -> EncoderPack:
    """
    Align both towers (and the vocabulary table) with a symmetric contrastive
    loss; returns the same pack, frozen.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if len(images) != len(captions):
        raise DataError("every image needs a caption")
    if len(images) < 2:
        raise TrainingError("contrastive pretraining needs at least 2 pairs")
    weights = pack.unfreeze_for_training()
    ids = caption_ids(pack, captions)
    adam = AdamState.zeros(weights)
    rng = rng_stream(config.seed, "pretrain")
    n = len(images)
    per_epoch = len(range(0, n - 1, config.batch_size))
    total = config.epochs * per_epoch
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b0 in range(0, n - 1, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            for w in weights:
                w.grad = None
            loss = pair_loss(pack, images[idx], ids[idx], config.tau)
            nc.backward(loss)
            adam.step(weights, config, config.lr_at(adam.t, total))
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
    for w in weights:
        w.grad = None
    return pack.freeze()


def pair_similarity_gap(pack: EncoderPack, images: np.ndarray, captions: Sequence[str]) -> float:
    """Mean matched-pair similarity minus mean mismatched similarity."""
    with nc.no_grad():
        f_img = image_features(pack, images)
        f_txt = encode_sequences(pack, nc.constant(pack.vocab_table.data[caption_ids(pack, captions)])).data
    sim = f_img @ f_txt.T
    n = len(sim)
    matched = np.trace(sim) / n
    mismatched = (sim.sum() - np.trace(sim)) / (n * n - n)
    return float(matched - mismatched)
