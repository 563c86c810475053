"""
Finite-difference checks for every differentiable op and for the protocol
losses end to end (through the frozen text encoder into the query bank and
the head).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .datastore import ToyGrammar
from .encoders import EncoderPack
from .protocols import ProtocolConfig, build_protocol, image_features

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4

Case = Tuple[Callable[..., nc.Tensor], List[nc.Tensor]]


@dataclass
class GradReport:
    ops: Dict[str, float]
    end_to_end: Dict[str, float]

    @property
    def max_op(self) -> float:
        return max(self.ops.values()) if self.ops else 0.0

    @property
    def max_end_to_end(self) -> float:
        return max(self.end_to_end.values()) if self.end_to_end else 0.0

    @property
    def passed(self) -> bool:
        return self.max_op < OP_TOL and self.max_end_to_end < END_TO_END_TOL

    def lines(self) -> List[str]:
        out = [f"op {name} {err:.3e}" for name, err in self.ops.items()]
        out += [f"end-to-end {name} {err:.3e}" for name, err in self.end_to_end.items()]
        out.append(f"max op {self.max_op:.3e} (tol {OP_TOL:.0e})")
        out.append(f"max end-to-end {self.max_end_to_end:.3e} (tol {END_TO_END_TOL:.0e})")
        return out


def _t(rng, *shape, low=None, high=None) -> nc.Tensor:
    if low is None:
        return nc.Tensor(rng.normal(size=shape))
    return nc.Tensor(rng.uniform(low, high, size=shape))


def _weighted(out: nc.Tensor, weights: np.ndarray) -> nc.Tensor:
    # a random projection keeps every output coordinate in play
    return (out * weights).sum()


def op_cases(rng: np.random.Generator) -> Dict[str, Case]:
    """One small random case per differentiable op, each reduced to a scalar."""
    cases: Dict[str, Case] = {}

    def unary(name, fn, x):
        w = rng.normal(size=fn(x).shape)
        cases[name] = (lambda a: _weighted(fn(a), w), [x])

    def binary(name, fn, a, b):
        w = rng.normal(size=fn(a, b).shape)
        cases[name] = (lambda x, y: _weighted(fn(x, y), w), [a, b])

    binary("add", nc.add, _t(rng, 3, 4), _t(rng, 4))
    binary("sub", nc.sub, _t(rng, 3, 1), _t(rng, 3, 4))
    binary("mul", nc.mul, _t(rng, 2, 3, 4), _t(rng, 3, 4))
    binary("matmul", nc.matmul, _t(rng, 2, 3, 4), _t(rng, 4, 5))
    binary("matmul-batched", nc.matmul, _t(rng, 2, 1, 3, 4), _t(rng, 3, 4, 2))
    unary("neg", nc.neg, _t(rng, 3, 4))
    unary("div-scalar", lambda a: a / 3.5, _t(rng, 3, 4))
    unary("exp", nc.exp, _t(rng, 3, 4))
    unary("log", nc.log, _t(rng, 3, 4, low=0.5, high=2.0))
    unary("gelu", nc.gelu, _t(rng, 3, 5))
    unary("transpose", lambda a: nc.transpose(a, (2, 0, 1)), _t(rng, 2, 3, 4))
    unary("reshape", lambda a: nc.reshape(a, (4, 6)), _t(rng, 2, 3, 4))
    unary("sum", lambda a: nc.sum(a, axis=1, keepdims=True), _t(rng, 3, 4))
    unary("mean", lambda a: nc.mean(a, axis=0), _t(rng, 3, 4))
    unary("take", lambda a: nc.take(a, 2, axis=1), _t(rng, 2, 4, 3))
    ids = rng.integers(0, 6, size=(3, 4))
    unary("gather_rows", lambda a: nc.gather_rows(a, ids), _t(rng, 6, 5))
    mask = rng.random((3, 4)) < 0.5
    binary("where", lambda a, b: nc.where(mask, a, b), _t(rng, 3, 4), _t(rng, 3, 4))
    binary("concat", lambda a, b: nc.concat([a, b], axis=1), _t(rng, 2, 3), _t(rng, 2, 2))
    binary("stack", lambda a, b: nc.stack([a, b], axis=0), _t(rng, 2, 3), _t(rng, 2, 3))
    unary("l2_normalize", nc.l2_normalize, _t(rng, 3, 5))
    unary("softmax", nc.softmax, _t(rng, 3, 5))
    unary("log_softmax", nc.log_softmax, _t(rng, 3, 5))
    x, g, b = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)
    w_ln = rng.normal(size=(2, 3, 6))
    cases["layer_norm"] = (lambda a, gg, bb: _weighted(nc.layer_norm(a, gg, bb), w_ln), [x, g, b])
    q, k, v = _t(rng, 2, 2, 4, 3), _t(rng, 2, 2, 4, 3), _t(rng, 2, 2, 4, 3)
    w_att = rng.normal(size=(2, 2, 4, 3))
    cases["attention"] = (lambda a, bb, c: _weighted(nc.attention(a, bb, c), w_att), [q, k, v])
    labels = rng.integers(0, 5, size=4)
    cases["cross_entropy"] = (lambda a: nc.cross_entropy(a, labels), [_t(rng, 4, 5)])
    label = int(rng.integers(0, 5))
    cases["cross_entropy-single"] = (lambda a: nc.cross_entropy(a, label), [_t(rng, 5)])
    return cases


def check_ops(seed: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: nc.gradcheck(fn, tensors) for name, (fn, tensors) in op_cases(rng).items()}


END_TO_END_VARIANTS: Dict[str, dict] = {
    "defo": dict(variant="defo", n_queries=4),
    "defo-identity": dict(variant="defo", n_queries=8, defo_init="class-name", identity_block=True),
    "coop": dict(variant="coop"),
    "target-opt": dict(variant="target-opt"),
    "linear-probe": dict(variant="linear-probe"),
}


def _sample_coords(rng, trainable: np.ndarray, count: int) -> np.ndarray:
    flat = np.flatnonzero(trainable.reshape(-1))
    if flat.size <= count:
        return flat
    return np.sort(rng.choice(flat, size=count, replace=False))


def check_protocol_loss(pack: EncoderPack, variant_kwargs: dict, seed: int,
                        class_names: Sequence[str] = None, batch: int = 6, coords_per_param: int = 16) -> float:
    """Relative error of the cross-entropy gradient w.r.t. every trainable parameter."""
    rng = np.random.default_rng(seed)
    class_names = list(class_names or ToyGrammar().class_names)
    config = ProtocolConfig(class_names=class_names, **variant_kwargs)
    state = build_protocol(pack, config, seed)
    cfg = pack.config
    images = rng.uniform(size=(batch, cfg.image_width, cfg.image_height, 3))
    labels = rng.integers(0, len(class_names), size=batch)
    feats = image_features(pack, images)
    params = state.parameters()
    # start away from the symmetric init so every path carries signal
    for p in params:
        p.tensor.data[p.trainable] += rng.normal(0.0, 0.1, size=p.n_trainable)
    coords = [_sample_coords(rng, p.trainable, coords_per_param) for p in params]

    def loss(*_):
        return nc.cross_entropy(state.logits(feats), labels)

    return nc.gradcheck(loss, [p.tensor for p in params], coords=coords)


def run_suite(pack: EncoderPack, seed: int) -> GradReport:
    ops = check_ops(seed)
    e2e = {name: check_protocol_loss(pack, kw, seed) for name, kw in END_TO_END_VARIANTS.items()}
    return GradReport(ops, e2e)
