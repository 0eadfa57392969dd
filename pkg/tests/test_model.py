import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apl_avqa import tensorcore as tc
from apl_avqa.blocks import TFM, ModelDims, set_identity
from apl_avqa.model import AUDIO, OBJECT, APLModel, ModelConfig

DIMS = ModelDims(T=3, N=4, L=5, d=8, d_a=6, d_o=7, C=6, heads=2, vocab=12)


def inputs(seed=0, B=2, L=5, dims=DIMS):
    r = np.random.default_rng(seed)
    return (
        r.standard_normal((B, dims.T, dims.d_a)),
        r.standard_normal((B, dims.T, dims.N, dims.d_o)),
        r.integers(1, dims.vocab, size=(B, L)),
    )


def model(config=None, seed=0):
    return APLModel(DIMS, config or ModelConfig(), seed=seed, dtype=np.float64)


def test_forward_shapes():
    audio, objects, tokens = inputs()
    out = model()(audio, objects, tokens)
    assert out.question.F_Q.shape == (2, 5, 8)
    assert out.question.F_q.shape == (2, 1, 8)
    assert out.F_O.shape == (2, 12, 8) and out.F_A.shape == (2, 3, 8)
    assert out.enhanced.F_O_prime.shape == (2, 12, 8)
    assert out.enhanced.F_A_prime.shape == (2, 3, 8)
    assert out.collected.F_O_dprime.shape == (2, 5, 8)
    assert out.fusion.beta.shape == (2, 1, 2)
    assert out.answer.p.shape == (2, 6)
    assert set(out.attention) == {"qcd_O", "qcd_A", "mcc_O", "mcc_A"}
    assert out.attention["qcd_O"].shape == (2, 2, 12, 5)
    assert out.attention["mcc_A"].shape == (2, 2, 5, 3)


def test_unbatched_forward():
    audio, objects, tokens = inputs(B=1)
    m = model()
    single = m(audio[0], objects[0], tokens[0])
    batched = m(audio, objects, tokens)
    np.testing.assert_allclose(single.answer.p.data, batched.answer.p.data[0], atol=1e-12)


def test_question_too_long():
    audio, objects, _ = inputs()
    with pytest.raises(tc.DimensionError):
        model()(audio, objects, np.ones((2, 6), dtype=int))


def test_zero_lstm_gives_zero_question_encoding():
    m = model()
    for p in m.lstm.parameters():
        p.data[...] = 0
    enc = m.encode_question(inputs()[2])
    assert not enc.F_Q.data.any() and not enc.F_q.data.any()


def test_seeded_construction_is_bit_identical():
    a, b = model(seed=3), model(seed=3)
    audio, objects, tokens = inputs()
    np.testing.assert_array_equal(a(audio, objects, tokens).answer.logits.data, b(audio, objects, tokens).answer.logits.data)
    assert not np.array_equal(model(seed=4).head.W.data, a.head.W.data)


def test_qcd_single_word_identity_block():
    m = model()
    set_identity(m.qcd_o)
    F_m = tc.tensor(np.random.default_rng(1).standard_normal((7, 8)))
    word = np.random.default_rng(2).standard_normal((1, 8))
    out = m.qcd_forward(F_m, tc.tensor(word), OBJECT)
    np.testing.assert_allclose(out.data, np.tile(word, (7, 1)), atol=1e-12)


def test_mcc_identical_rows_identity_block():
    m = model()
    set_identity(m.mcc_a)
    row = np.random.default_rng(1).standard_normal((1, 8))
    F_Q = tc.tensor(np.random.default_rng(2).standard_normal((5, 8)))
    out = m.mcc_forward(F_Q, tc.tensor(np.tile(row, (3, 1))), AUDIO)
    np.testing.assert_allclose(out.data, np.tile(row, (5, 1)), atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([True, False]))
def test_stages_match_direct_tfm_calls(seed, share):
    m = model(ModelConfig(share_modalities=share), seed=seed % 7)
    audio, objects, tokens = inputs(seed)
    out = m(audio, objects, tokens)
    F_Q = out.question.F_Q
    qcd_o = m.qcd if share else m.qcd_o
    mcc_a = m.mcc if share else m.mcc_a
    np.testing.assert_array_equal(out.enhanced.F_O_prime.data, qcd_o(out.F_O, F_Q, F_Q).data)
    np.testing.assert_array_equal(out.collected.F_A_dprime.data, mcc_a(F_Q, out.enhanced.F_A_prime, out.enhanced.F_A_prime).data)
    assert out.collected.F_O_dprime.shape[-2] == tokens.shape[-1]


def test_zero_beta_layer_is_even_split():
    m = model()
    m.beta_layer.W.data[...] = 0
    m.beta_layer.b.data[...] = 0
    out = m(*inputs())
    np.testing.assert_allclose(out.fusion.beta.data, 0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_beta_is_a_distribution(seed):
    beta = model(seed=seed % 5)(*inputs(seed)).fusion.beta.data
    assert np.all((beta > 0) & (beta < 1))
    np.testing.assert_allclose(beta.sum(-1), 1.0, atol=1e-12)


def test_forced_beta_selects_object_stream():
    m = model()
    out = m(*inputs(), beta_override=[1.0, 0.0])
    pooled = m.transform_o(out.collected.F_O_dprime.mean(axis=-2, keepdims=True))
    np.testing.assert_array_equal(out.fusion.f_out.data, pooled.data)


def test_zero_head_gives_uniform_answer_and_ln_c_loss():
    m = model()
    m.head.W.data[...] = 0
    out = m(*inputs())
    np.testing.assert_allclose(out.answer.p.data, 1 / 6)
    assert -out.answer.log_p.data[0, 3] == pytest.approx(math.log(6), abs=1e-12)
    assert -out.answer.log_p.data[0, 3] == pytest.approx(1.7918, abs=1e-4)


def test_answer_distribution_sums_to_one():
    p = model()(*inputs(5)).answer.p.data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("qcd,mcc", [(True, False), (False, True), (False, False)])
def test_module_ablation_variants(qcd, mcc):
    m = model(ModelConfig(use_qcd=qcd, use_mcc=mcc))
    out = m(*inputs())
    assert out.answer.p.shape == (2, 6)
    assert ("qcd_O" in out.attention) == qcd and ("mcc_O" in out.attention) == mcc
    assert isinstance(m.qcd_o, TFM) == qcd


def test_shared_modalities_reuse_one_block():
    shared = model(ModelConfig(share_modalities=True))
    split = model()
    assert len(shared.parameters()) < len(split.parameters())
    assert shared._stage("qcd", OBJECT) is shared._stage("qcd", AUDIO)
    assert split._stage("qcd", OBJECT) is not split._stage("qcd", AUDIO)


def test_model_gradients_reach_every_parameter():
    with tc.precision(np.float64):
        m = model()
        audio, objects, tokens = inputs()
        loss = m(audio, objects, tokens).answer.log_p.sum() * -1.0
        tc.backward(loss, m.parameters())
    for name, p in m.named_parameters().items():
        assert p.grad is not None and p.grad.shape == p.shape, name
