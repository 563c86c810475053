from dataclasses import replace

import numpy as np
import pytest

from defolab import numcore as nc
from defolab.encoders import encode_image, encode_sequences, encode_texts
from defolab.numcore import ShapeError, Tensor
from defolab.protocols import (ClassifierHead, LinearProbe, ProtocolConfig, ProtocolError, ProtocolState,
                               build_coop_bank, build_head, build_protocol, build_query_bank,
                               build_target_bank, clip_plus_linear_predict, coop_predict, defo_predict,
                               ensemble_predict, image_features, linear_probe_predict, prompt_bank,
                               retrieval_logits, similarity_vector, target_opt_predict, zero_shot_predict)

NAMES = ["red circle", "blue square", "red triangle"]


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture
def images(rng):
    return rng.uniform(size=(5, 16, 16, 3))


@pytest.fixture
def cfg():
    return ProtocolConfig(class_names=NAMES, templates=("a photo of a {}", "a picture of a {}"))


# config

def test_config_validation_lists_errors():
    with pytest.raises(ProtocolError) as exc:
        ProtocolConfig(class_names=[], tau=0.0, variant="nope")
    msg = str(exc.value)
    assert "variant" in msg and "class_names" in msg and "tau" in msg


# similarity_vector

def test_similarity_self_and_orthogonal(rng):
    f = unit(rng, 8)
    g = unit(rng, 8)
    g = g - (g @ f) * f
    g /= np.linalg.norm(g)
    s = similarity_vector(f, [Tensor(f), Tensor(g)]).data
    assert abs(s[0] - 1) < 1e-9 and abs(s[1]) < 1e-9


def test_similarity_matches_dot_oracle(rng):
    f, t = unit(rng, 6), unit(rng, 4, 6)
    oracle = [sum(f[j] * t[i, j] for j in range(6)) for i in range(4)]
    np.testing.assert_allclose(similarity_vector(f, t).data, oracle, rtol=0, atol=1e-14)


def test_similarity_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        similarity_vector(unit(rng, 6), unit(rng, 3, 5))


# zero-shot

def test_zero_shot_identical_texts_uniform(tiny_pack, images):
    cfg = ProtocolConfig(class_names=["red circle"] * 4)
    p = zero_shot_predict(tiny_pack, cfg, images[0]).probabilities
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-12)


def test_zero_shot_closed_form_two_classes():
    logits = retrieval_logits(nc.constant([[1.0, 0.0]]), nc.constant(np.eye(2)), tau=1.0)
    np.testing.assert_allclose(nc.softmax(logits).data[0], [0.73106, 0.26894], atol=1e-5)


def test_zero_shot_matches_standalone_oracle(tiny_pack, images, cfg):
    f = encode_image(tiny_pack, images[1]).data
    t = encode_texts(tiny_pack, [f"a photo of a {n}" for n in NAMES]).data
    oracle = np.exp(t @ f / 0.07) / np.exp(t @ f / 0.07).sum()
    np.testing.assert_allclose(zero_shot_predict(tiny_pack, cfg, images[1]).probabilities, oracle,
                               rtol=0, atol=1e-12)


def test_zero_shot_rejects_empty_names():
    with pytest.raises(ProtocolError):
        ProtocolConfig(class_names=[], variant="zero-shot")


# ensemble

def test_ensemble_of_identical_templates_is_zero_shot(tiny_pack, images):
    cfg = ProtocolConfig(class_names=NAMES, templates=("a photo of a {}", "a photo of a {}"))
    a = ensemble_predict(tiny_pack, cfg, images[0]).probabilities
    b = zero_shot_predict(tiny_pack, cfg, images[0]).probabilities
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_ensemble_mean_then_normalize(tiny_pack, images, cfg):
    f = encode_image(tiny_pack, images[2]).data
    t1 = encode_texts(tiny_pack, cfg.prompts(cfg.templates[0])).data
    t2 = encode_texts(tiny_pack, cfg.prompts(cfg.templates[1])).data
    mean = (t1 + t2) / 2
    mean /= np.linalg.norm(mean, axis=1, keepdims=True)
    oracle = np_softmax(mean @ f / cfg.tau)
    p = ensemble_predict(tiny_pack, cfg, images[2]).probabilities
    np.testing.assert_allclose(p, oracle, rtol=0, atol=1e-12)
    assert abs(p.sum() - 1) < 1e-9


def test_ensemble_needs_two_templates(tiny_pack, images):
    with pytest.raises(ProtocolError):
        ensemble_predict(tiny_pack, ProtocolConfig(class_names=NAMES), images[0])


# linear probe

def test_probe_zero_weights_uniform(tiny_pack, images):
    probe = LinearProbe(Tensor(np.zeros((16, 3))), Tensor(np.zeros(3)))
    np.testing.assert_allclose(linear_probe_predict(tiny_pack, probe, images[0]).probabilities, 1 / 3,
                               atol=1e-15)


def test_probe_large_bias_wins(tiny_pack, images, rng):
    probe = LinearProbe(Tensor(rng.normal(size=(16, 3))), Tensor([0.0, 0.0, 100.0]))
    assert linear_probe_predict(tiny_pack, probe, images[0]).predicted == 2


def test_probe_ce_gradient(rng):
    feats = unit(rng, 6, 16)
    labels = rng.integers(0, 3, size=6)
    b = Tensor(rng.normal(size=3))
    fn = lambda w: nc.cross_entropy(LinearProbe(w, b).logits(nc.constant(feats)), labels)
    assert nc.gradcheck(fn, Tensor(rng.normal(size=(16, 3)))) < 1e-5


def test_probe_shape_error(rng):
    with pytest.raises(ShapeError):
        LinearProbe(Tensor(np.zeros((16, 3)))).logits(nc.constant(np.zeros((2, 8))))


# CoOp

def test_coop_template_init_equals_zero_shot(tiny_pack, images, cfg):
    bank = build_coop_bank(replace(cfg, variant="coop"), tiny_pack, seed=0)
    for img in images:
        a = coop_predict(tiny_pack, cfg, bank, img).probabilities
        b = zero_shot_predict(tiny_pack, cfg, img).probabilities
        assert np.max(np.abs(a - b)) < 1e-10


def coop_loss_grad(pack, cfg, bank, feats, labels):
    st = ProtocolState(pack, replace(cfg, variant="coop"), bank=bank)
    nc.cross_entropy(st.logits(feats), labels).backward()
    return bank.values.grad


def test_coop_gradient_only_on_prefix(tiny_pack, images, cfg):
    bank = build_coop_bank(replace(cfg, variant="coop"), tiny_pack, seed=0)
    g = coop_loss_grad(tiny_pack, cfg, bank, image_features(tiny_pack, images), np.array([0, 1, 2, 0, 1]))
    L = cfg.coop_prefix_len
    assert np.abs(g[:L]).sum() > 0
    assert not g[L:].any()


def test_shared_prefix_gradient_is_sum_of_per_class(tiny_pack, images, cfg):
    feats, labels = image_features(tiny_pack, images), np.array([2, 1, 0, 0, 1])
    shared = build_coop_bank(replace(cfg, variant="coop"), tiny_pack, seed=0)
    split = build_coop_bank(replace(cfg, variant="coop", coop_shared=False), tiny_pack, seed=0)
    gs = coop_loss_grad(tiny_pack, cfg, shared, feats, labels)
    gp = coop_loss_grad(tiny_pack, cfg, split, feats, labels)
    L = cfg.coop_prefix_len
    np.testing.assert_allclose(gs[:L], gp[:, :L].sum(axis=0), rtol=0, atol=1e-12)


def test_coop_name_too_long(tiny_pack):
    cfg = ProtocolConfig(class_names=["red red red red red"], variant="coop")
    with pytest.raises(ProtocolError, match="red red"):
        build_coop_bank(cfg, tiny_pack, seed=0)


# target optimization

def test_target_init_equals_zero_shot(tiny_pack, images, cfg):
    bank = build_target_bank(replace(cfg, variant="target-opt"), tiny_pack, seed=0)
    for img in images:
        a = target_opt_predict(tiny_pack, cfg, bank, img).probabilities
        b = zero_shot_predict(tiny_pack, cfg, img).probabilities
        assert np.max(np.abs(a - b)) < 1e-10


def test_target_gradient_isolated_per_class(tiny_pack, images, cfg):
    bank = build_target_bank(replace(cfg, variant="target-opt", target_init="random"), tiny_pack, seed=1)
    st = ProtocolState(tiny_pack, replace(cfg, variant="target-opt"), bank=bank)
    logits = st.logits(image_features(tiny_pack, images))
    # only logits of classes 0 and 2 carry upstream gradient
    (nc.take(logits, 0, axis=1).sum() + nc.take(logits, 2, axis=1).sum()).backward()
    g = bank.values.grad
    assert not g[1].any()
    assert np.abs(g[0]).sum() > 0 and np.abs(g[2]).sum() > 0
    assert not g[:, ~bank.mask[0]].any()


def test_target_template_overflow(tiny_pack):
    cfg = ProtocolConfig(class_names=NAMES, variant="target-opt", target_name_len=6)
    with pytest.raises(ProtocolError, match="exceeds"):
        build_target_bank(cfg, tiny_pack, seed=0)


# DeFo

def reduction_config(names, **kw):
    return ProtocolConfig(class_names=names, n_queries=len(names), defo_init="prompt", identity_block=True,
                          freeze_queries=True, **kw)


def test_defo_reduces_to_zero_shot(tiny_pack, images):
    cfg = reduction_config(NAMES)
    st = build_protocol(tiny_pack, cfg, seed=0)
    assert st.parameters() == []
    for img in images:
        a = defo_predict(tiny_pack, cfg, st.bank, st.head, img).probabilities
        b = zero_shot_predict(tiny_pack, cfg, img).probabilities
        assert np.max(np.abs(a - b)) < 1e-10


def test_defo_zero_head_uniform(tiny_pack, images, cfg):
    bank = build_query_bank(cfg, tiny_pack, "random", seed=0, n=5)
    head = ClassifierHead(Tensor(np.zeros((5, 3)), requires_grad=True), np.zeros((5, 3), bool), 1 / 0.07)
    np.testing.assert_allclose(defo_predict(tiny_pack, cfg, bank, head, images[0]).probabilities, 1 / 3,
                               atol=1e-15)


def test_defo_forward_oracle(tiny_pack, images, rng):
    cfg = ProtocolConfig(class_names=["red circle", "blue circle"])
    bank = build_query_bank(cfg, tiny_pack, "random", seed=3, n=4)
    W = rng.normal(size=(4, 2))
    head = ClassifierHead(Tensor(W), np.zeros((4, 2), bool), 1 / 0.07)
    f = encode_image(tiny_pack, images[0]).data
    t = encode_sequences(tiny_pack, Tensor(bank.values.data)).data
    s = np.array([np.dot(f, t[i]) for i in range(4)])
    z = np.array([sum(s[i] / 0.07 * W[i, j] for i in range(4)) for j in range(2)])
    oracle = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(defo_predict(tiny_pack, cfg, bank, head, images[0]).probabilities, oracle,
                               rtol=0, atol=1e-12)


def test_defo_head_bank_mismatch(tiny_pack, images, cfg):
    bank = build_query_bank(cfg, tiny_pack, "random", seed=0, n=4)
    with pytest.raises(ShapeError):
        defo_predict(tiny_pack, cfg, bank, build_head(cfg, 5, seed=0), images[0])


def test_defo_gradients_respect_masks(tiny_pack, images):
    cfg = ProtocolConfig(class_names=NAMES, n_queries=5, defo_init="class-name", identity_block=True)
    st = build_protocol(tiny_pack, cfg, seed=2)
    nc.cross_entropy(st.logits(image_features(tiny_pack, images)), np.array([0, 1, 2, 2, 1])).backward()
    gb, gw = st.bank.values.grad, st.head.W.grad
    assert not gb[~st.bank.mask].any()
    assert np.abs(gb[st.bank.mask]).sum() > 0
    assert np.abs(gw[3:]).sum() > 0
    assert all(w.grad is None for w in tiny_pack.weights.values())


def test_defo_query_permutation_invariance(tiny_pack, images, cfg, rng):
    st = build_protocol(tiny_pack, replace(cfg, n_queries=6), seed=4)
    perm = rng.permutation(6)
    bank = st.bank
    pbank = type(bank)(Tensor(bank.values.data[perm]), bank.fixed[perm], bank.mask[perm],
                       bank.token_ids[perm])
    phead = ClassifierHead(Tensor(st.head.W.data[perm]), st.head.frozen_mask[perm], st.head.logit_scale)
    a = ProtocolState(tiny_pack, cfg, bank=bank, head=st.head).probabilities(images)
    b = ProtocolState(tiny_pack, cfg, bank=pbank, head=phead).probabilities(images)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# CLIP + linear

def test_clip_linear_same_path_as_frozen_defo(tiny_pack, images, cfg, rng):
    head = ClassifierHead(Tensor(rng.normal(size=(3, 3))), np.zeros((3, 3), bool), 1 / 0.07)
    frozen = prompt_bank(tiny_pack, cfg)
    a = clip_plus_linear_predict(tiny_pack, cfg, head, images[0]).probabilities
    b = defo_predict(tiny_pack, cfg, frozen, head, images[0]).probabilities
    assert a.tobytes() == b.tobytes()


def test_clip_linear_identity_is_zero_shot(tiny_pack, images, cfg):
    head = ClassifierHead(Tensor(np.eye(3)), np.ones((3, 3), bool), 1 / cfg.tau)
    a = clip_plus_linear_predict(tiny_pack, cfg, head, images[3]).probabilities
    b = zero_shot_predict(tiny_pack, cfg, images[3]).probabilities
    assert np.max(np.abs(a - b)) < 1e-10


# build_query_bank

def test_bank_seeded(tiny_pack, cfg):
    a = build_query_bank(cfg, tiny_pack, "random", seed=7, n=4)
    b = build_query_bank(cfg, tiny_pack, "random", seed=7, n=4)
    assert np.array_equal(a.values.data, b.values.data) and a.mask.all()
    assert abs(a.values.data.std() - 0.02) < 0.005


def test_class_name_bank_layout(tiny_pack, cfg):
    bank = build_query_bank(cfg, tiny_pack, "class-name", seed=0, n=3)
    assert (bank.fixed_positions() > 0).sum() == 3
    bank5 = build_query_bank(cfg, tiny_pack, "class-name", seed=0, n=5)
    assert bank5.fixed_positions().tolist()[3:] == [0, 0]
    p = cfg.defo_prefix_len
    assert bank5.mask[:3, :p].all() and not bank5.mask[:3, p:].any()
    red = tiny_pack.word_id("red")
    assert bank5.token_ids[0, p] == red
    np.testing.assert_array_equal(bank5.values.data[0, p], tiny_pack.vocab_table.data[red])


def test_class_name_bank_needs_n_ge_k(tiny_pack, cfg):
    with pytest.raises(ProtocolError, match="n >= k"):
        build_query_bank(cfg, tiny_pack, "class-name", seed=0, n=2)


# invariants shared by every head

@pytest.mark.parametrize("variant", ["zero-shot", "ensemble", "linear-probe", "coop", "target-opt", "defo"])
def test_heads_normalized_and_scale_free(tiny_pack, cfg, rng, variant):
    st = build_protocol(tiny_pack, replace(cfg, variant=variant, n_queries=5), seed=0)
    raw = rng.normal(size=(4, 16))
    p = st.probabilities_from_features(nc.l2_normalize(nc.constant(raw)).data)
    np.testing.assert_allclose(p.sum(axis=1), 1, rtol=0, atol=1e-9)
    q = st.probabilities_from_features(nc.l2_normalize(nc.constant(37.5 * raw)).data)
    np.testing.assert_allclose(p, q, rtol=0, atol=1e-9)


def test_argmax_ignores_logit_shift(rng):
    z = rng.normal(size=(10, 4))
    assert (np.argmax(nc.softmax(nc.constant(z)).data, 1) == np.argmax(nc.softmax(nc.constant(z + 9)).data, 1)).all()


def test_prediction_top5_and_ties():
    from defolab.protocols import Prediction
    p = Prediction.from_probabilities([0.25, 0.25, 0.25, 0.25])
    assert p.predicted == 0 and [i for i, _ in p.top5] == [0, 1, 2, 3]
