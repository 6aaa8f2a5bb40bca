import math

import numpy as np
import pytest

from deskrank import tensor as T
from deskrank.encoder import EncoderConfig, encoder_forward, init_params
from deskrank.rankers import (DEFAULT_MUS, DEFAULT_SIGMAS, Ranker, RankerConfig, RankerKind, conv_knrm_score,
                              init_head, kernel_pool, knrm_score, score_last_int, score_mult_int, score_rep,
                              score_term_trans)
from deskrank.tensor import Tensor, grad_check
from deskrank.text import RESERVED, ConfigError, Vocabulary, encode_pair, encode_single

ENC = EncoderConfig(layers=2, hidden=8, heads=2, ff_dim=16, max_positions=12, vocab_size=25, init_std=0.3)
VOCAB = Vocabulary(list(RESERVED) + [f"t{i}" for i in range(20)])


def words(rng, lo=1, hi=4):
    return [f"t{int(i)}" for i in rng.integers(0, 20, int(rng.integers(lo, hi + 1)))]


def params_for(kind, seed=0, **rcfg):
    cfg = RankerConfig(kind=kind, max_len=12, **rcfg)
    p = {}
    if cfg.kind.uses_encoder:
        p.update(init_params(ENC, seed))
    p.update(init_head(cfg.kind, cfg, ENC, len(VOCAB), seed))
    return cfg, p


def test_kind_enum():
    assert {k.value for k in RankerKind} == {"Rep", "LastInt", "MultInt", "TermTrans", "KNRM", "ConvKNRM"}
    assert not RankerKind("KNRM").uses_encoder


def test_layer_range_validation():
    with pytest.raises(ConfigError):
        RankerConfig(layer_range=(2, 1)).layers(2)
    with pytest.raises(ConfigError):
        RankerConfig(layer_range=(0, 2)).layers(2)
    assert RankerConfig().layers(3) == [1, 2, 3]


def test_kernel_bank_validation():
    with pytest.raises(ConfigError):
        RankerConfig(kernel_mus=(1.0,), kernel_sigmas=(0.0,))


# ---------------------------------------------------------------- Rep

def test_rep_identical_texts_score_one():
    _, p = params_for("Rep")
    s = encode_single(["t1", "t2"], VOCAB, 12)
    assert score_rep(s, s, p, ENC).score == pytest.approx(1.0, abs=1e-9)


def test_rep_matches_public_encoder():
    _, p = params_for("Rep", 3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, d = encode_single(words(rng), VOCAB, 12), encode_single(words(rng), VOCAB, 12)
        a = encoder_forward(q, p, ENC).hidden[-1].data[0]
        b = encoder_forward(d, p, ENC).hidden[-1].data[0]
        expected = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        got = score_rep(q, d, p, ENC).score
        assert got == pytest.approx(expected, abs=1e-9)
        assert -1.0 <= got <= 1.0


# ---------------------------------------------------------------- Last-Int

def test_last_int_zero_weight_and_linearity():
    _, p = params_for("LastInt")
    qd = encode_pair(["t1"], ["t2", "t3"], VOCAB, 12)
    base = score_last_int(qd, p, ENC).score
    p2 = dict(p, **{"head/w": Tensor(p["head/w"].data * 2)})
    assert score_last_int(qd, p2, ENC).score == pytest.approx(2 * base, abs=1e-12)
    p0 = dict(p, **{"head/w": Tensor(np.zeros(8))})
    assert score_last_int(qd, p0, ENC).score == 0.0


def test_last_int_one_hot_reads_cls_component():
    _, p = params_for("LastInt")
    qd = encode_pair(["t1"], ["t2"], VOCAB, 12)
    cls = encoder_forward(qd, p, ENC).hidden[-1].data[0]
    for i in range(8):
        p1 = dict(p, **{"head/w": Tensor(np.eye(8)[i])})
        assert score_last_int(qd, p1, ENC).score == pytest.approx(cls[i], abs=1e-12)


def test_last_int_sensitive_to_document():
    differ = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        _, p = params_for("LastInt", seed)
        q, d = words(rng), words(rng, 2, 4)
        d2 = list(d)
        d2[0] = "t19" if d[0] != "t19" else "t18"
        a = score_last_int(encode_pair(q, d, VOCAB, 12), p, ENC).score
        b = score_last_int(encode_pair(q, d2, VOCAB, 12), p, ENC).score
        differ += a != b
    assert differ >= 95


# ---------------------------------------------------------------- Mult-Int

def test_mult_int_hand_sum_and_breakdown():
    _, p = params_for("MultInt", 2)
    qd = encode_pair(["t4", "t5"], ["t6"], VOCAB, 12)
    out = encoder_forward(qd, p, ENC)
    expected = sum(out.hidden[k].data[0] @ p[f"head/w_mult/{k}"].data for k in (1, 2))
    b = score_mult_int(qd, p, ENC)
    assert b.score == pytest.approx(expected, abs=1e-9)
    assert sum(b.layer_parts.values()) == pytest.approx(b.score, abs=1e-9)


def test_mult_int_reduces_to_last_int():
    _, p = params_for("MultInt", 1)
    w = np.random.default_rng(5).normal(size=8)
    p["head/w_mult/1"] = Tensor(np.zeros(8))
    p["head/w_mult/2"] = Tensor(w)
    p["head/w"] = Tensor(w)
    qd = encode_pair(["t1", "t9"], ["t3"], VOCAB, 12)
    assert score_mult_int(qd, p, ENC).score == pytest.approx(score_last_int(qd, p, ENC).score, abs=1e-9)


def test_mult_int_empty_range():
    _, p = params_for("MultInt")
    with pytest.raises(ConfigError):
        score_mult_int(encode_pair(["t1"], ["t2"], VOCAB, 12), p, ENC, layer_range=(2, 1))


# ---------------------------------------------------------------- Term-Trans

def test_term_trans_single_query_two_doc_tokens():
    _, p = params_for("TermTrans", 4)
    qd = encode_pair(["t1"], ["t2", "t3"], VOCAB, 12)
    out = encoder_forward(qd, p, ENC)
    b = score_term_trans(qd, p, ENC)
    for k in (1, 2):
        P = p[f"head/P/{k}"].data
        h = out.hidden[k].data
        q = np.maximum(h[1] @ P, 0)
        cos = [q @ np.maximum(h[j] @ P, 0) / (np.linalg.norm(q) * np.linalg.norm(np.maximum(h[j] @ P, 0)))
               for j in (3, 4)]
        assert b.layer_similarity[k] == pytest.approx(np.mean(cos), abs=1e-9)
    assert b.score == pytest.approx(sum(b.layer_parts.values()), abs=1e-9)


def test_term_trans_range_and_zero_projection():
    rng = np.random.default_rng(0)
    for seed in range(20):
        _, p = params_for("TermTrans", seed)
        b = score_term_trans(encode_pair(words(rng), words(rng), VOCAB, 12), p, ENC)
        assert all(0.0 <= s <= 1.0 for s in b.layer_similarity.values())
    for k in (1, 2):
        p[f"head/P/{k}"] = Tensor(np.zeros((8, 8)))
    assert score_term_trans(encode_pair(["t1"], ["t2"], VOCAB, 12), p, ENC).score == 0.0


def test_term_trans_empty_side_warns(caplog):
    cfg, p = params_for("TermTrans")
    r = Ranker(cfg, ENC, VOCAB, p)
    assert r.score([], [["t1"]])[0] == 0.0
    assert "empty" in caplog.text


def test_term_trans_separate_encoding_in_range():
    cfg, p = params_for("TermTrans", term_trans_encoding="separate")
    r = Ranker(cfg, ENC, VOCAB, p)
    b = r.breakdown(["t1", "t2"], ["t3", "t1"])
    assert all(0.0 <= s <= 1.0 for s in b.layer_similarity.values())


# ---------------------------------------------------------------- kernel pooling

def test_knrm_exact_match_kernel():
    _, head = params_for("KNRM")
    b = knrm_score([7], [7], head)
    # M = [[1]]: the mu=1 kernel sees exp(0) = 1 and log(1) = 0
    assert b.kernel_features[0] == 0.0
    assert b.kernel_features[1] == pytest.approx(-((1 - 0.9) ** 2) / (2 * 0.01), abs=1e-9)


def test_kernel_pool_hand_built_matrix():
    M = np.array([[0.95, 0.1], [-0.3, 0.62]])
    phi = kernel_pool(Tensor(M[None]), np.ones((1, 2), bool), np.ones((1, 2), bool), DEFAULT_MUS, DEFAULT_SIGMAS).data[0]
    expected = []
    for mu, sigma in zip(DEFAULT_MUS, DEFAULT_SIGMAS):
        total = 0.0
        for i in range(2):
            soft = math.exp(-(M[i, 0] - mu) ** 2 / (2 * sigma ** 2)) + math.exp(-(M[i, 1] - mu) ** 2 / (2 * sigma ** 2))
            total += math.log(max(soft, 1e-10))
        expected.append(total)
    np.testing.assert_allclose(phi, expected, atol=1e-9)


def test_knrm_document_permutation_invariant():
    _, head = params_for("KNRM", 1)
    assert knrm_score([5, 6], [7, 8, 9], head).score == pytest.approx(knrm_score([5, 6], [9, 7, 8], head).score,
                                                                       abs=1e-12)


def test_knrm_empty_side_is_tanh_bias():
    _, head = params_for("KNRM")
    head["head/out_b"] = Tensor(np.array(0.3))
    assert knrm_score([], [5], head).score == pytest.approx(math.tanh(0.3))


def test_conv_knrm_feature_length():
    _, head = params_for("ConvKNRM")
    assert len(conv_knrm_score([5, 6, 7], [8, 9], head, max_ngram=2).kernel_features) == 11 * 4


def test_conv_knrm_short_side_channel_is_zero():
    _, head = params_for("ConvKNRM")
    phi = conv_knrm_score([5], [8, 9, 10], head, max_ngram=2).kernel_features
    np.testing.assert_array_equal(phi[22:], 0.0)  # query bigram channels


def test_conv_knrm_unigram_identity_reduces_to_knrm():
    cfg, head = params_for("ConvKNRM", max_ngram=1, emb_dim=6, conv_filters=6)
    head["head/embedding"] = Tensor(np.abs(head["head/embedding"].data))  # relu leaves these unchanged
    head["head/conv1_w"] = Tensor(np.eye(6))
    head["head/conv1_b"] = Tensor(np.zeros(6))
    a = conv_knrm_score([5, 6], [7, 8, 5], head, max_ngram=1)
    b = knrm_score([5, 6], [7, 8, 5], head)
    assert a.score == pytest.approx(b.score, abs=1e-9)
    np.testing.assert_allclose(a.kernel_features, b.kernel_features, atol=1e-9)


def _straight_line_conv_knrm(q, d, head, max_ngram):
    E = head["head/embedding"].data

    def grams(ids, n):
        out = []
        for s in range(len(ids) - n + 1):
            x = np.concatenate([E[i] for i in ids[s:s + n]])
            out.append(np.maximum(x @ head[f"head/conv{n}_w"].data + head[f"head/conv{n}_b"].data, 0))
        return out

    feats = []
    for nq in range(1, max_ngram + 1):
        for nd in range(1, max_ngram + 1):
            Q, D = grams(q, nq), grams(d, nd)
            for mu, sigma in zip(DEFAULT_MUS, DEFAULT_SIGMAS):
                total = 0.0
                for a in Q:
                    soft = 0.0
                    for b in D:
                        na, nb = np.linalg.norm(a), np.linalg.norm(b)
                        c = a @ b / (na * nb) if na > 0 and nb > 0 else 0.0
                        soft += math.exp(-(c - mu) ** 2 / (2 * sigma ** 2))
                    total += math.log(max(soft, 1e-10))
                feats.append(total)
    phi = np.array(feats)
    return math.tanh(phi @ head["head/out_w"].data + float(head["head/out_b"].data)), phi


@pytest.mark.parametrize("seed", range(3))
def test_conv_knrm_matches_straight_line(seed):
    _, head = params_for("ConvKNRM", seed, emb_dim=5, conv_filters=7)
    rng = np.random.default_rng(seed)
    head["head/out_w"] = Tensor(rng.normal(size=44) * 0.05)
    q, d = [5, 6, 7], [8, 5, 9]
    score, phi = _straight_line_conv_knrm(q, d, head, 2)
    b = conv_knrm_score(q, d, head, max_ngram=2)
    np.testing.assert_allclose(b.kernel_features, phi, atol=1e-9)
    assert b.score == pytest.approx(score, abs=1e-9)


# ---------------------------------------------------------------- Ranker bundle

@pytest.mark.parametrize("kind", [k.value for k in RankerKind])
def test_ranker_forward_matches_single_pair_ops(kind):
    cfg, p = params_for(kind, 6)
    r = Ranker(cfg, ENC, VOCAB, p)
    q, d = ["t1", "t2"], ["t2", "t3", "t4"]
    batched = r.score(q, [d, ["t5"]])
    if kind == "Rep":
        single = score_rep(encode_single(q, VOCAB, 12), encode_single(d, VOCAB, 12), p, ENC).score
    elif kind == "LastInt":
        single = score_last_int(encode_pair(q, d, VOCAB, 12), p, ENC).score
    elif kind == "MultInt":
        single = score_mult_int(encode_pair(q, d, VOCAB, 12), p, ENC).score
    elif kind == "TermTrans":
        single = score_term_trans(encode_pair(q, d, VOCAB, 12), p, ENC).score
    elif kind == "KNRM":
        single = knrm_score(VOCAB.ids(q), VOCAB.ids(d), p).score
    else:
        single = conv_knrm_score(VOCAB.ids(q), VOCAB.ids(d), p).score
    assert batched[0] == pytest.approx(single, abs=1e-9)


@pytest.mark.parametrize("kind", [k.value for k in RankerKind])
def test_ranker_gradients(kind):
    cfg, p = params_for(kind, 8, emb_dim=6, conv_filters=5)
    r = Ranker(cfg, ENC, VOCAB, p)
    pairs = [(["t1", "t2"], ["t2", "t3", "t4"]), (["t5"], ["t6", "t5"])]
    # scale keeps the tanh heads away from saturation so gradients are informative
    if kind in ("KNRM", "ConvKNRM"):
        p["head/out_w"].data[...] = np.random.default_rng(0).normal(size=p["head/out_w"].shape) * 0.05
    err = grad_check(lambda: (r.forward(pairs)[0] * Tensor([1.0, -0.7])).sum(), list(p.values()))
    assert err <= 1e-4


def test_conv_knrm_gradient_is_nonzero():
    cfg, p = params_for("ConvKNRM", 8, emb_dim=6, conv_filters=5)
    r = Ranker(cfg, ENC, VOCAB, p)
    loss = r.forward([(["t1", "t2"], ["t2", "t3", "t4"])])[0].sum()
    for t in p.values():
        t.grad = None
    T.backward(loss)
    assert np.abs(p["head/conv1_w"].grad).sum() > 0
    assert np.abs(p["head/embedding"].grad).sum() > 0
