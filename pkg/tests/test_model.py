import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgner import autodiff as ad
from pgner.align import is_well_formed
from pgner.model import (TAGS, BiLSTMTagger, DecoderState, EncoderStates, DecoderStep, PointerGenConfig,
                         PointerGenerator, TaggerConfig, make_batch, tags_to_entities)
from pgner.textproc import CHAR, SeqGenExample

V = 12


def example(src_ext, tgt=(5, 6, 2), V=V, name="d"):
    src_ext = np.asarray(src_ext, dtype=np.int64)
    src = np.where(src_ext >= V, 3, src_ext)
    n_oov = int(max(0, src_ext.max() - V + 1))
    return SeqGenExample(name, src, src_ext, [f"oov{k}" for k in range(n_oov)],
                         np.asarray(tgt, dtype=np.int64), len(src))


def small_model(copy=True, dtype="float64", seed=0, **kw):
    cfg = PointerGenConfig(V, embedding_dim=4, hidden_dim=3, copy_enabled=copy, dtype=dtype, **kw)
    return PointerGenerator(cfg, seed=seed)


def first_step(model, batch):
    enc = model.encode(batch)
    prev = np.full(batch.size, 1)
    return enc, model.decode_step(prev, model.initial_state(enc), enc)


def test_encode_shapes():
    m = small_model()
    enc = m.encode(make_batch([example([7])], "float64"))
    assert enc.states.shape == (1, 1, 6)
    enc = m.encode(make_batch([example([7, 8, 9, 4]), example([5, 6])], "float64"))
    assert enc.states.shape == (2, 4, 6)


def test_encode_rejects_bad_ids():
    m = small_model()
    bad = example([4, 5])
    bad.source_ids = np.array([4, V + 3])
    with pytest.raises(IndexError):
        m.encode(make_batch([bad], "float64"))


def test_zero_params_give_equal_outputs():
    m = small_model()
    m.load_state_dict({k: np.zeros_like(v) for k, v in m.state_dict().items()})
    enc = m.encode(make_batch([example([4, 5, 6, 7])], "float64"))
    s = enc.states.value
    assert np.all(s == s.flat[0])


def test_inference_is_deterministic():
    m = small_model()
    b = make_batch([example([4, 5, V, 7, V + 1])], "float64")
    _, s1 = first_step(m, b)
    _, s2 = first_step(m, b)
    np.testing.assert_array_equal(m.final_distribution(s1, b.src_ext, b.n_oov).value,
                                  m.final_distribution(s2, b.src_ext, b.n_oov).value)


def test_single_position_attention_is_one():
    m = small_model()
    b = make_batch([example([9])], "float64")
    enc, step = first_step(m, b)
    np.testing.assert_allclose(step.attention.value, [[1.0]])
    np.testing.assert_allclose(step.context.value, enc.states.value[:, 0, :])


def test_identical_states_attend_uniformly(rng):
    m = small_model()
    h = rng.normal(size=(1, 1, 6))
    states = ad.constant(np.concatenate([h, h], axis=1))
    keys = ad.linear(ad.reshape(states, (2, 6)), m.params["att.Wh"], m.params["att.b"])
    enc = EncoderStates(states, ad.reshape(keys, (1, 2, 3)), np.ones((1, 2)), np.zeros((1, 2)),
                        np.array([[4, 4]]), [], [])
    a, ctx = m.attend(ad.constant(rng.normal(size=(1, 3))), enc)
    np.testing.assert_allclose(a.value, [[0.5, 0.5]], atol=1e-12)
    np.testing.assert_allclose(ctx.value, h[:, 0], atol=1e-12)


def test_attention_context_gradient_wrt_key_projection(rng):
    m = small_model()
    b = make_batch([example([4, 5, 6])], "float64")
    w = rng.normal(size=(1, 6))

    def f():
        _, step = first_step(m, b)
        return ad.sum(ad.mul_const(step.context, w))

    assert ad.grad_check(f, [m.params["att.Wh"]], epsilon=1e-5).passed(1e-4)


def _manual_step(pv, att, p_gen):
    B = pv.shape[0]
    z = ad.constant(np.zeros((B, 1)))
    return DecoderStep(DecoderState([z], [z], z), ad.constant(att), ad.constant(np.zeros((B, 2))),
                       ad.constant(np.full((B, 1), p_gen)), ad.constant(pv))


def test_mixture_worked_value():
    m = small_model()
    pv = np.full((1, V), 0.8 / (V - 1))
    pv[0, 5] = 0.2
    att = np.array([[0.25, 0.5, 0.25]])
    src_ext = np.array([[5, 7, 5]])
    out = m.final_distribution(_manual_step(pv, att, 0.7), src_ext, 0).value
    assert out[0, 5] == pytest.approx(0.7 * 0.2 + 0.3 * 0.5)
    assert out[0, 5] == pytest.approx(0.29)


def test_gate_boundaries(rng):
    m = small_model()
    pv = rng.dirichlet(np.ones(V))[None]
    att = rng.dirichlet(np.ones(4))[None]
    src_ext = np.array([[4, V, 4, V + 1]])
    one = m.final_distribution(_manual_step(pv, att, 1.0), src_ext, 2).value
    np.testing.assert_allclose(one, np.concatenate([pv, [[0, 0]]], axis=1))
    zero = m.final_distribution(_manual_step(pv, att, 0.0), src_ext, 2).value
    expect = np.zeros((1, V + 2))
    np.add.at(expect[0], src_ext[0], att[0])
    np.testing.assert_allclose(zero, expect)


@settings(max_examples=30)
@given(st.lists(st.integers(4, V + 3), min_size=1, max_size=8), st.integers(0, 1000))
def test_final_distribution_normalized(src, seed):
    m = small_model(seed=seed % 7)
    b = make_batch([example(src)], "float64")
    enc, step = first_step(m, b)
    for _ in range(3):
        fd = m.final_distribution(step, b.src_ext, b.n_oov).value
        assert fd.shape == (1, V + b.n_oov)
        assert abs(fd.sum() - 1) < 1e-6
        assert abs(step.attention.value.sum() - 1) < 1e-6
        assert 0 <= step.p_gen.value.item() <= 1
        step = m.decode_step(np.array([int(fd.argmax())]), step.state, enc)


def test_gold_probability_matches_materialized(rng):
    m = small_model()
    b = make_batch([example([4, V, 6, V, 4]), example([V, 5, 9, 8, 7])], "float64")
    _, step = first_step(m, b)
    full = m.final_distribution(step, b.src_ext, b.n_oov).value
    for t in range(V + b.n_oov):
        tgt = np.array([t, t])
        np.testing.assert_allclose(m.gold_probability(step, b.src_ext, tgt).value, full[:, t], atol=1e-12)


def test_oov_mass_only_with_copy():
    src = [4, V, 6]
    for copy in (True, False):
        m = small_model(copy=copy)
        b = make_batch([example(src)], "float64")
        _, step = first_step(m, b)
        mass = m.final_distribution(step, b.src_ext, b.n_oov).value[0, V]
        assert (mass > 0) == copy


def test_char_mode_disables_copy():
    cfg = PointerGenConfig(V, mode=CHAR)
    assert not cfg.copy_enabled
    assert "ptr.W" not in PointerGenerator(cfg).params


def test_config_validation():
    with pytest.raises(ValueError):
        PointerGenConfig(0)
    with pytest.raises(ValueError):
        PointerGenConfig(V, mode="bytes")
    with pytest.raises(ValueError):
        PointerGenConfig(V, dropout_prob=1.0)


@pytest.mark.parametrize("copy", [True, False])
def test_end_to_end_nll_gradient(copy):
    m = small_model(copy=copy, seed=3)
    b = make_batch([example([4, V, 6, 7, V + 1], tgt=(V, 8, 2))], "float64")
    rep = ad.grad_check(lambda: m.nll(b), m.params, epsilon=1e-5)
    assert rep.passed(1e-4), rep.worst


def test_two_layer_decoder_gradient():
    m = small_model(seed=1, encoder_layers=2, decoder_layers=2)
    b = make_batch([example([4, 5, V], tgt=(V, 2))], "float64")
    assert ad.grad_check(lambda: m.nll(b), m.params, epsilon=1e-5).passed(1e-4)


# ---------------------------------------------------------------- tagger


def test_tagger_label_set():
    assert len(TAGS) == 9 and TaggerConfig(5).n_labels == 9


def test_tagger_rows_normalized_and_repaired(rng):
    t = BiLSTMTagger(TaggerConfig(V, embedding_dim=4, hidden_dim=3, dtype="float64"), seed=2)
    # random large output weights so raw argmax produces invalid sequences
    t.params["out.W"].value = rng.normal(scale=5, size=t.params["out.W"].shape)
    exs = [example(rng.integers(4, V, size=n)) for n in (7, 3, 11)]
    b = make_batch(exs, "float64", with_targets=False)
    probs = t.forward(b).value
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
    for tags, n in zip(t.predict_tags(b), (7, 3, 11)):
        assert len(tags) == n and is_well_formed(tags)


def test_tagger_gradient():
    t = BiLSTMTagger(TaggerConfig(V, embedding_dim=4, hidden_dim=3, dtype="float64"), seed=2)
    b = make_batch([example([4, 5, 6]), example([7, 8])], "float64", with_targets=False)
    tags = np.array([[1, 3, 0], [4, 0, 0]])
    assert ad.grad_check(lambda: t.nll(b, tags), t.params, epsilon=1e-5).passed(1e-4)


def test_tags_to_entities():
    ents = tags_to_entities(["U-plaintiff", "O", "B-defendant", "L-defendant"], ["Olson", "v.", "Acme", "Corp"])
    assert [(e.label.value, e.surface) for e in ents] == [("plaintiff", "Olson"), ("defendant", "Acme Corp")]
