"""
Metrics and query interpretation.

A *head closure* is any callable mapping a batch of images ``(N, w, h, 3)``
to class probabilities ``(N, k)``; ``ProtocolState.probabilities`` is one.
"""

from __future__ import annotations

import csv
from decimal import ROUND_DOWN, Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import numcore as nc
from .datastore import DataError, Dataset
from .encoders import EncoderPack
from .protocols import QueryBank

HeadClosure = Callable[[np.ndarray], np.ndarray]

RESERVED_ROWS = 2


def top_k_indices(probs: np.ndarray, k: int = 5) -> np.ndarray:
    """Highest-probability classes per row; equal values keep the lower index first."""
    probs = np.atleast_2d(probs)
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def classwise_std(per_class_acc, sample: bool = False) -> float:
    """Population standard deviation of per-class accuracy (``sample=True`` divides by k - 1)."""
    acc = np.asarray(per_class_acc, dtype=np.float64)
    if acc.ndim != 1 or acc.size < 2:
        raise ValueError("class-wise std needs at least 2 classes")
    return float(np.std(acc, ddof=1 if sample else 0))


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: np.ndarray
    classwise_std: float
    confusion: np.ndarray
    top5_indices: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def metrics(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "classwise_std": self.classwise_std}


def report_from_probabilities(probs: np.ndarray, labels: np.ndarray) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty dataset")
    if probs.shape[0] != len(labels):
        raise ValueError(f"{probs.shape[0]} predictions for {len(labels)} labels")
    k = probs.shape[1]
    top = top_k_indices(probs, min(5, k))
    pred = top[:, 0]
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    present = per_class[~np.isnan(per_class)]
    std = classwise_std(present) if present.size >= 2 else 0.0
    return EvalReport(
        top1=float(np.trace(confusion) / len(labels)),
        top5=float(np.mean((top == labels[:, None]).any(axis=1))),
        per_class=per_class,
        classwise_std=std,
        confusion=confusion,
        top5_indices=top,
    )


def evaluate(head: HeadClosure, dataset: Dataset) -> EvalReport:
    """
    Top-1/top-5 accuracy, per-class accuracy, its class-wise std and the
    confusion counts (rows true, columns predicted). Classes absent from the
    data get NaN accuracy and are left out of the std.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    return report_from_probabilities(head(dataset.images), dataset.labels)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _fmt_down(x: float) -> str:
    """6 significant digits rounded toward zero, so dumped probabilities never sum above 1."""
    d = Decimal(float(x))
    if d == 0 or not d.is_finite():
        return _fmt(x)
    q = d.quantize(Decimal(1).scaleb(d.adjusted() - 5), rounding=ROUND_DOWN)
    return _fmt(float(q))


def dump_top5(head: HeadClosure, dataset: Dataset, path) -> None:
    """One CSV row per example: true class, then five (class, probability) pairs."""
    if len(dataset) == 0:
        raise DataError("cannot dump predictions for an empty dataset")
    probs = np.asarray(head(dataset.images))
    top = top_k_indices(probs, min(5, probs.shape[1]))
    header = ["index", "true"]
    for r in range(top.shape[1]):
        header += [f"class{r + 1}", f"prob{r + 1}"]
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, (label, row) in enumerate(zip(dataset.labels, top)):
                rec = [i, dataset.class_names[label]]
                for c in row:
                    rec += [dataset.class_names[c], _fmt_down(probs[i, c])]
                w.writerow(rec)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# interpretation
# ---------------------------------------------------------------------------

@dataclass
class SlotReading:
    query: int
    position: int
    trainable: bool
    neighbors: List[Tuple[str, float]]

    @property
    def word(self) -> str:
        return self.neighbors[0][0]

    @property
    def distance(self) -> float:
        return self.neighbors[0][1]


@dataclass
class Interpretation:
    slots: List[SlotReading]

    def for_query(self, i: int) -> List[SlotReading]:
        return [s for s in self.slots if s.query == i]

    def trainable(self) -> List[SlotReading]:
        return [s for s in self.slots if s.trainable]

    def words(self, top: int = 5) -> set:
        return {w for s in self.trainable() for w, _ in s.neighbors[:top]}

    def to_rows(self) -> List[List[str]]:
        rows = []
        for s in self.slots:
            row = [str(s.query), str(s.position), "trainable" if s.trainable else "fixed"]
            for w, d in s.neighbors:
                row += [w, _fmt(d)]
            rows.append(row)
        return rows


def nearest_words(vectors: np.ndarray, table: np.ndarray, top: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exhaustive Euclidean scan of ``vectors (S, e)`` against vocabulary rows
    from index 2 on. Returns row indices and distances, ordered by distance,
    then by row index.
    """
    cand = table[RESERVED_ROWS:]
    diff = vectors[:, None, :] - cand[None, :, :]
    dist = np.sqrt(np.einsum("sve,sve->sv", diff, diff))
    order = np.argsort(dist, axis=1, kind="stable")[:, :top]
    return order + RESERVED_ROWS, np.take_along_axis(dist, order, axis=1)


def interpret_queries(bank: QueryBank, pack: EncoderPack, top: int = 5) -> Interpretation:
    """Nearest vocabulary words of every trainable slot; fixed slots report their own word."""
    with nc.no_grad():
        seqs = bank.assemble().data
    table = pack.vocab_table.data
    words = pack.vocab_words
    qi, pi = np.nonzero(bank.mask)
    idx, dist = nearest_words(seqs[qi, pi], table, top) if len(qi) else (None, None)
    learned = {(q, p): r for r, (q, p) in enumerate(zip(qi, pi))}
    slots = []
    for q in range(bank.n):
        for p in range(bank.m):
            r = learned.get((q, p))
            if r is None:
                slots.append(SlotReading(q, p, False, [(words[bank.token_ids[q, p]], 0.0)]))
            else:
                nb = [(words[j], float(d)) for j, d in zip(idx[r], dist[r])]
                slots.append(SlotReading(q, p, True, nb))
    return Interpretation(slots)
