import json
import math

import numpy as np
import pytest

from defolab import numcore as nc
from defolab.datastore import DataError, ToyGrammar, caption_corpus, generate_toy_dataset
from defolab.encoders import EncoderConfig, init_pack
from defolab.numcore import Tensor
from defolab.protocols import Param, ProtocolConfig, build_protocol, image_features
from defolab.trainer import (OptimizerState, PretrainConfig, TrainConfig, TrainingError, augment_batch,
                             caption_ids, contrastive_loss, contrastive_pretrain, pair_loss,
                             pair_similarity_gap, rng_stream, sample_few_shot, sgd_step, train_protocol)

from .conftest import TINY

THREE = ToyGrammar(shapes=("circle",), colors=("red", "blue", "green"), textures=("plain",))


@pytest.fixture(scope="module")
def tiny_data():
    return generate_toy_dataset(ToyGrammar(), 36, seed=2, size=(16, 16))


def scalar_param(value, trainable=True):
    return Param("x", Tensor(np.array([value]), requires_grad=True), np.array([trainable]))


# config

def test_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.momentum, c.weight_decay, c.epochs) == (32, 2e-3, 0.9, 0.01, 50)
    assert not c.augment and c.shots is None


def test_config_rejects_bad_values():
    with pytest.raises(ValueError) as exc:
        TrainConfig(shots=3, momentum=1.5, batch_size=0)
    msg = str(exc.value)
    assert "shots" in msg and "momentum" in msg and "batch_size" in msg


def test_cosine_schedule():
    c = TrainConfig(learning_rate=1.0, epochs=4, lr_schedule="cosine")
    assert c.lr_at(0) == 1.0 and abs(c.lr_at(2) - 0.5) < 1e-15
    assert TrainConfig().lr_at(30) == 2e-3


# sgd_step

def test_plain_gradient_descent():
    p = scalar_param(1.5)
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0, learning_rate=0.1)
    sgd_step([p], [np.array([2.0])], OptimizerState(), cfg)
    assert p.tensor.data[0] == 1.5 - 0.1 * 2.0


def test_momentum_carries_over_zero_grad():
    p = scalar_param(0.0)
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0, learning_rate=0.1)
    state = OptimizerState(velocities={"x": np.array([3.0])})
    sgd_step([p], [np.array([0.0])], state, cfg)
    assert p.tensor.data[0] == -0.1 * 0.9 * 3.0


def test_three_step_recurrence():
    mu, wd, lr = 0.9, 0.01, 0.05
    grads = [0.7, -1.2, 0.4]
    # hand-unrolled oracle
    w0 = 2.0
    v1 = grads[0] + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + grads[1] + wd * w1
    w2 = w1 - lr * v2
    v3 = mu * v2 + grads[2] + wd * w2
    w3 = w2 - lr * v3
    p, state = scalar_param(w0), OptimizerState()
    cfg = TrainConfig(momentum=mu, weight_decay=wd, learning_rate=lr)
    for g in grads:
        sgd_step([p], [np.array([g])], state, cfg)
    assert abs(p.tensor.data[0] - w3) < 1e-15
    assert state.step == 3


def test_frozen_entries_untouched():
    t = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    p = Param("w", t, np.array([True, False, True]))
    sgd_step([p], [np.ones(3)], OptimizerState(), TrainConfig(weight_decay=0.5, learning_rate=0.1))
    assert t.data[1] == 2.0 and t.data[0] != 1.0


def test_missing_gradient():
    with pytest.raises(TrainingError, match="'x'"):
        sgd_step([scalar_param(1.0)], [None], OptimizerState(), TrainConfig())


# few-shot sampling

def test_few_shot_counts(toy_train):
    sub = sample_few_shot(toy_train, 2, seed=0)
    assert len(sub) == 2 * toy_train.k
    assert np.bincount(sub.labels).tolist() == [2] * toy_train.k


def test_few_shot_full_class(toy_train):
    size = np.bincount(toy_train.labels).min()
    sub = sample_few_shot(toy_train, size, seed=0)
    assert np.bincount(sub.labels).tolist() == [size] * toy_train.k


def test_few_shot_seeds_differ(toy_train):
    a, b = sample_few_shot(toy_train, 4, seed=0), sample_few_shot(toy_train, 4, seed=1)
    assert np.bincount(a.labels).tolist() == np.bincount(b.labels).tolist()
    assert not np.array_equal(a.images, b.images)


def test_few_shot_names_short_class(toy_train):
    small = toy_train.subset(np.flatnonzero(toy_train.labels != 3)[:50].tolist()
                             + np.flatnonzero(toy_train.labels == 3)[:1].tolist())
    with pytest.raises(DataError, match="blue square"):
        sample_few_shot(small, 2, seed=0)


def test_three_classes_two_shots():
    ds = generate_toy_dataset(THREE, 12, seed=0, size=(16, 16))
    assert np.bincount(sample_few_shot(ds, 2, seed=0).labels).tolist() == [2, 2, 2]


# augmentation

def test_augment_is_seeded_crop_flip(rng):
    imgs = rng.uniform(size=(4, 16, 16, 3))
    a = augment_batch(imgs, rng_stream(0, "augment"))
    b = augment_batch(imgs, rng_stream(0, "augment"))
    assert a.shape == imgs.shape and np.array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_named_streams_independent():
    a = rng_stream(0, "data").random(4)
    assert not np.array_equal(a, rng_stream(0, "augment").random(4))
    assert np.array_equal(a, rng_stream(0, "data").random(4))


# train_protocol

def defo_state(pack, names, seed=0, **kw):
    kw.setdefault("n_queries", 8)
    return build_protocol(pack, ProtocolConfig(class_names=names, **kw), seed)


def test_zero_lr_leaves_params(tiny_pack, tiny_data):
    st = defo_state(tiny_pack, tiny_data.class_names)
    before = {k: v.copy() for k, v in st.state().items()}
    train_protocol(st, tiny_data, TrainConfig(learning_rate=0.0, epochs=3))
    assert all(np.array_equal(before[k], v) for k, v in st.state().items())


def test_same_seed_same_checkpoint(tiny_pack, tiny_data):
    runs = []
    for _ in range(2):
        st = defo_state(tiny_pack, tiny_data.class_names, seed=5)
        runs.append(train_protocol(st, tiny_data, TrainConfig(epochs=3, batch_size=8, seed=5)).checkpoint)
    assert runs[0].equals(runs[1])


def test_resume_matches_straight_run(tiny_pack, tiny_data):
    cfg = TrainConfig(epochs=6, batch_size=10, seed=1, augment=True)
    straight = train_protocol(defo_state(tiny_pack, tiny_data.class_names), tiny_data, cfg)
    first = train_protocol(defo_state(tiny_pack, tiny_data.class_names), tiny_data, cfg, stop_epoch=3)
    resumed = train_protocol(defo_state(tiny_pack, tiny_data.class_names), tiny_data, cfg,
                             resume=first.checkpoint)
    assert resumed.checkpoint.equals(straight.checkpoint)
    assert first.losses + resumed.losses == straight.losses


def test_frozen_entries_survive_training(tiny_pack, tiny_data):
    st = defo_state(tiny_pack, tiny_data.class_names, defo_init="class-name", identity_block=True)
    W0, fixed0 = st.head.W.data.copy(), st.bank.values.data[~st.bank.mask].copy()
    train_protocol(st, tiny_data, TrainConfig(epochs=2, batch_size=8, weight_decay=0.5))
    assert np.array_equal(st.head.W.data[:6], W0[:6])
    assert not np.array_equal(st.head.W.data[6:], W0[6:])
    assert np.array_equal(st.bank.values.data[~st.bank.mask], fixed0)


def test_step_zero_anchor(tiny_pack, tiny_data):
    st = defo_state(tiny_pack, tiny_data.class_names, defo_init="class-name", identity_block=True)
    feats = image_features(tiny_pack, tiny_data.images)
    with nc.no_grad():
        from defolab.encoders import encode_sequences
        from defolab.protocols import retrieval_logits
        text = encode_sequences(tiny_pack, st.bank.assemble())
        k = tiny_data.k
        retrieval = nc.softmax(retrieval_logits(nc.constant(feats), nc.constant(text.data[:k]), 0.07)).data
    assert np.max(np.abs(st.probabilities_from_features(feats) - retrieval)) <= 1e-10


def test_errors(tiny_pack, tiny_data):
    with pytest.raises(DataError):
        train_protocol(defo_state(tiny_pack, tiny_data.class_names), tiny_data.subset([]), TrainConfig())
    frozen = defo_state(tiny_pack, tiny_data.class_names, n_queries=6, defo_init="prompt",
                        identity_block=True, freeze_queries=True)
    with pytest.raises(TrainingError, match="no trainable"):
        train_protocol(frozen, tiny_data, TrainConfig(epochs=1))


def test_report_jsonl(tiny_pack, tiny_data):
    rep = train_protocol(defo_state(tiny_pack, tiny_data.class_names), tiny_data,
                         TrainConfig(epochs=2, batch_size=12))
    lines = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "loss", "train_acc"}


def test_three_class_defo_fits():
    pack = init_pack(EncoderConfig(), seed=0).freeze()
    ds = generate_toy_dataset(THREE, 60, seed=0)
    # separability oracle: least squares on frozen features fits every label
    f = np.c_[image_features(pack, ds.images), np.ones(len(ds))]
    coef = np.linalg.lstsq(f, np.eye(3)[ds.labels], rcond=None)[0]
    assert ((f @ coef).argmax(1) == ds.labels).all()
    st = defo_state(pack, ds.class_names)
    rep = train_protocol(st, ds, TrainConfig(seed=0))
    assert rep.records[-1].train_acc >= 0.95


def test_target_opt_loss_trends_down(tiny_pack):
    ds = generate_toy_dataset(THREE, 30, seed=1, size=(16, 16))
    st = build_protocol(tiny_pack, ProtocolConfig(class_names=ds.class_names, variant="target-opt"), 0)
    losses = train_protocol(st, ds, TrainConfig(epochs=50, batch_size=10, learning_rate=0.05)).losses
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


# contrastive pretraining

def test_identical_pairs_give_ln2(rng):
    f = nc.l2_normalize(nc.constant(np.tile(rng.normal(size=8), (2, 1))))
    for tau in (0.07, 1.0, 3.0):
        assert abs(contrastive_loss(f, f, tau).item() - math.log(2)) < 1e-6


def test_contrastive_batch_of_one():
    with pytest.raises(TrainingError):
        contrastive_loss(nc.constant(np.ones((1, 4))), nc.constant(np.ones((1, 4))), 0.07)


def test_pair_loss_gradient(rng):
    pack = init_pack(TINY, seed=3)
    pack.unfreeze_for_training()
    images = rng.uniform(size=(2, 16, 16, 3))
    ids = caption_ids(pack, ["a red circle", "a blue square"])
    for name in ("text.proj", "vision.proj"):
        w = pack.weights[name]

        def fn(x, name=name):
            saved = pack.weights[name]
            pack.weights[name] = x
            try:
                return pair_loss(pack, images, ids, 0.07)
            finally:
                pack.weights[name] = saved

        assert nc.gradcheck(fn, Tensor(w.data)) < 1e-4


def test_pretraining_aligns_pairs():
    g = ToyGrammar(colors=("red", "blue", "green"))
    train = generate_toy_dataset(g, 96, seed=0, size=(16, 16))
    held = generate_toy_dataset(g, 48, seed=1, size=(16, 16))
    pack = init_pack(TINY, seed=0)
    gap0 = pair_similarity_gap(pack, held.images, held.captions)
    out = contrastive_pretrain(pack, train.images, caption_corpus(train, seed=0),
                               PretrainConfig(epochs=15, batch_size=32, learning_rate=5e-3))
    assert out is pack and pack.frozen
    gap = pair_similarity_gap(pack, held.images, held.captions)
    assert gap > 0 and gap > gap0


def test_pretrain_needs_unfrozen_pack(tiny_pack, tiny_data):
    with pytest.raises(RuntimeError):
        contrastive_pretrain(tiny_pack, tiny_data.images, tiny_data.captions, PretrainConfig(epochs=1))
