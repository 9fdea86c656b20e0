import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgner.decode import (DecodePenalties, PointerGeneratorSession, StepOutput, beam_search,
                          coverage_penalty, decode_document, greedy_decode, hypothesis_score,
                          length_penalty)
from pgner.model import PointerGenConfig, PointerGenerator, make_batch
from pgner import autodiff as ad
from pgner.textproc import BOS_ID, EOS_ID, SeqGenExample, Vocabulary, build_vocab


class TableSession:
    """Toy decoder whose next-token distribution is a fixed function of the prefix."""

    def __init__(self, width=5, src_len=3, seed=0, table=None, sharp=1.0):
        self.width, self.source_length, self.seed = width, src_len, seed
        self.marker_ids = frozenset()
        self.table, self.sharp = table, sharp

    def dist(self, prefix):
        if self.table is not None:
            return self.table(prefix)
        r = np.random.default_rng([self.seed, len(prefix), *prefix])
        return r.dirichlet(np.full(self.width, self.sharp)), r.dirichlet(np.ones(self.source_length))


def make_session(**kw):
    return _PrefixTracking(TableSession(**kw))


class _PrefixTracking:
    def __init__(self, inner):
        self.inner = inner
        self.source_length = inner.source_length
        self.marker_ids = inner.marker_ids

    def start(self):
        return ("root", ())

    def step(self, prev_ids, states):
        prefixes = []
        for prev, (tag, pre) in zip(prev_ids, states):
            prefixes.append(pre if tag == "root" else pre + (int(prev),))
        out = [self.inner.dist(p) for p in prefixes]
        probs = np.stack([p for p, _ in out])
        att = np.stack([a for _, a in out])
        K = len(states)
        return StepOutput(probs, att, [("node", p) for p in prefixes], np.ones(K), probs, np.zeros_like(probs))


# ------------------------------------------------------------- penalties


def test_length_penalty_values():
    assert length_penalty(1, 0.9) == 1.0
    assert length_penalty(1, 3.7) == 1.0
    assert length_penalty(5, 0.9) == pytest.approx(1.5836, abs=1e-4)
    assert length_penalty(5, 0.9) == pytest.approx((10 / 6) ** 0.9, rel=1e-14)
    assert all(length_penalty(n, 0.0) == 1.0 for n in range(1, 50))
    with pytest.raises(ValueError):
        length_penalty(0, 0.9)


def test_coverage_penalty_values():
    assert coverage_penalty(np.array([1.0, 0.3, 0.99]), 5) == 0
    assert coverage_penalty(np.array([1.5, 0.3]), 5) == pytest.approx(2.5)
    assert coverage_penalty(np.array([9.0, 4.0]), 0) == 0
    with pytest.raises(ValueError):
        coverage_penalty(np.array([-0.1]), 1)


def test_penalty_validation():
    for bad in (dict(alpha=-1), dict(beta=-0.1), dict(beam_size=0), dict(max_len=0)):
        with pytest.raises(ValueError):
            DecodePenalties(**bad)


# ------------------------------------------------------------ toy search


def _score_sequence(session, seq, pen):
    prefix, logp = (), 0.0
    cov = np.zeros(session.source_length)
    for y in seq:
        p, a = session.inner.dist(prefix)
        logp += math.log(max(p[y], 1e-12))
        cov = cov + a
        prefix = prefix + (y,)
    return hypothesis_score(logp, len(seq), cov, pen)


def _has_repeat(seq):
    bg = list(zip(seq, seq[1:]))
    return len(bg) != len(set(bg))


def brute_force_best(session, pen):
    W, best = session.inner.width, None
    others = [w for w in range(W) if w != EOS_ID]
    for n in range(1, pen.max_len + 1):
        for body in itertools.product(others, repeat=n - 1):
            seq = list(body) + [EOS_ID]
            if pen.block_repeat_bigrams and _has_repeat(seq):
                continue
            s = _score_sequence(session, seq, pen)
            if best is None or s > best[0] + 1e-12:
                best = (s, seq)
    return best


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("blocking", [False, True])
def test_full_width_beam_matches_enumeration(seed, blocking):
    pen = DecodePenalties(alpha=0.9, beta=5.0, beam_size=5 ** 5, max_len=5, block_repeat_bigrams=blocking)
    sess = make_session(width=5, src_len=2, seed=seed, sharp=0.7)
    res = beam_search(sess, pen)
    want_score, want_seq = brute_force_best(sess, pen)
    assert res.best.score == pytest.approx(want_score, rel=1e-9, abs=1e-12)
    assert res.best.tokens == want_seq
    assert not res.flagged


def test_beam_one_equals_greedy_on_random_models():
    for seed in range(100):
        sess = make_session(width=6, src_len=4, seed=seed, sharp=0.5)
        res = beam_search(sess, DecodePenalties.off(beam_size=1, max_len=8))
        assert res.best.body == greedy_decode(sess, 8)


def _chain(table):
    """Markov table: next distribution depends only on the previous token."""
    def dist(prefix):
        prev = prefix[-1] if prefix else BOS_ID
        p = np.zeros(5)
        for tok, pr in table.get(prev, {EOS_ID: 1.0}).items():
            p[tok] = pr
        return p, np.full(2, 0.5)
    return dist


A, B = 3, 4
LOOP = {BOS_ID: {A: 0.9, EOS_ID: 0.1}, A: {B: 0.6, A: 0.3, EOS_ID: 0.1}, B: {A: 0.7, EOS_ID: 0.3}}


def test_blocking_steers_away_from_repeated_bigram():
    sess = make_session(table=_chain(LOOP), width=5, src_len=2)
    off = DecodePenalties(alpha=0, beta=0, beam_size=1, max_len=4, block_repeat_bigrams=False)
    on = DecodePenalties(alpha=0, beta=0, beam_size=1, max_len=4, block_repeat_bigrams=True)
    assert greedy_decode(sess, 4) == [A, B, A, B]
    unblocked = beam_search(sess, off)
    assert unblocked.best.tokens == [A, B, A, B] and unblocked.flagged
    blocked = beam_search(sess, on)
    assert blocked.best.tokens == [A, B, A, A] and not _has_repeat(blocked.best.tokens)
    # the exhaustive optimum over non-repeating sequences of at most four steps
    wide = DecodePenalties(alpha=0, beta=0, beam_size=5 ** 4, max_len=4)
    assert beam_search(sess, wide).best.tokens == brute_force_best(sess, wide)[1]


@settings(max_examples=40)
@given(st.integers(0, 10 ** 6), st.integers(1, 6))
def test_no_repeated_bigrams_and_finite_scores(seed, beam):
    sess = make_session(width=4, src_len=3, seed=seed, sharp=0.3)
    res = beam_search(sess, DecodePenalties(beam_size=beam, max_len=10))
    for h in res.hypotheses:
        assert not _has_repeat(h.tokens)
        assert math.isfinite(h.score) and h.log_prob <= 0
        assert h.coverage.shape == (3,)
    assert len(res.hypotheses) <= beam


def test_eos_first_gives_empty_body():
    table = {BOS_ID: {EOS_ID: 1.0}}
    sess = make_session(table=_chain(table), width=5, src_len=2)
    assert greedy_decode(sess, 5) == []
    res = beam_search(sess, DecodePenalties(beam_size=3))
    assert res.best.body == [] and res.best.tokens == [EOS_ID]


def test_no_eos_within_max_len_is_flagged():
    table = {BOS_ID: {A: 1.0}, A: {B: 1.0}, B: {A: 1.0}}
    sess = make_session(table=_chain(table), width=5, src_len=2)
    res = beam_search(sess, DecodePenalties.off(beam_size=2, max_len=6))
    assert res.flagged and len(res.best.tokens) == 6 and res.best.body == res.best.tokens


def test_ties_break_on_token_id():
    table = {BOS_ID: {A: 0.5, B: 0.5}, A: {EOS_ID: 1.0}, B: {EOS_ID: 1.0}}
    sess = make_session(table=_chain(table), width=5, src_len=2)
    assert beam_search(sess, DecodePenalties(beam_size=1)).best.tokens == [A, EOS_ID]
    both = beam_search(sess, DecodePenalties(beam_size=2))
    assert [h.tokens for h in both.hypotheses] == [[A, EOS_ID], [B, EOS_ID]]


def test_beam_monotonicity_statistic(capsys):
    """Wider beams usually score at least as well; search errors are counted, not failed."""
    violations = total = 0
    for seed in range(60):
        sess = make_session(width=6, src_len=3, seed=seed, sharp=0.4)
        s1 = beam_search(sess, DecodePenalties(beam_size=2, max_len=8)).best.score
        s2 = beam_search(sess, DecodePenalties(beam_size=6, max_len=8)).best.score
        total += 1
        violations += s2 < s1 - 1e-12
    with capsys.disabled():
        print(f"\nbeam monotonicity violations (2 -> 6): {violations}/{total}")
    assert 0 <= violations <= total


# ------------------------------------------------------ pointer-generator


V = 14


def _example(src_ext, name="d"):
    src_ext = np.asarray(src_ext, dtype=np.int64)
    n = int(max(0, src_ext.max() - V + 1))
    return SeqGenExample(name, np.where(src_ext >= V, 3, src_ext), src_ext, [f"oov{k}" for k in range(n)],
                         np.array([2]), len(src_ext))


def _pg(seed, copy=True):
    m = PointerGenerator(PointerGenConfig(V, embedding_dim=5, hidden_dim=4, copy_enabled=copy), seed=seed)
    r = np.random.default_rng(seed)
    for p in m.params.values():
        p.value = (p.value + r.normal(scale=0.8, size=p.value.shape)).astype(np.float32)
    return m


@pytest.mark.parametrize("copy", [True, False])
def test_session_probs_match_model(copy):
    m = _pg(3, copy)
    ex = _example([4, V, 7, V + 1, 4, 9])
    sess = PointerGeneratorSession(m, ex)
    state = sess.start()
    out = sess.step(np.array([BOS_ID]), [state])
    b = make_batch([ex], with_targets=False)
    with ad.no_grad():
        enc = m.encode(b)
        step = m.decode_step(np.array([BOS_ID]), m.initial_state(enc), enc)
        want = m.final_distribution(step, b.src_ext, b.n_oov).value
    np.testing.assert_allclose(out.probs, want, atol=1e-6)
    assert abs(out.probs.sum() - 1) < 1e-5


def test_pg_beam_one_equals_greedy():
    for seed in range(10):
        m = _pg(seed)
        sess = PointerGeneratorSession(m, _example([4, 5, V, 6, 7, V + 1, 8]))
        res = beam_search(sess, DecodePenalties.off(beam_size=1, max_len=12))
        assert res.best.body == greedy_decode(sess, 12)


def test_decode_document_output():
    vocab = build_vocab([["a", "b", "c", "d", "e", "f", "g", "h"]], 100)
    m = PointerGenerator(PointerGenConfig(vocab.size, embedding_dim=4, hidden_dim=4), seed=1)
    ex = SeqGenExample("doc7", np.array([4, 3, 5]), np.array([4, vocab.size, 5]), ["Zed"], np.array([2]), 3)
    d1 = decode_document(m, ex, vocab, DecodePenalties(beam_size=3, max_len=6))
    d2 = decode_document(m, ex, vocab, DecodePenalties(beam_size=3, max_len=6))
    assert d1.to_json() == d2.to_json()
    rec = json.loads(d1.to_json())
    assert set(rec) == {"id", "generated_tokens", "score", "copy_fraction"}
    assert rec["id"] == "doc7" and 0.0 <= rec["copy_fraction"] <= 1.0
    assert all(isinstance(t, str) for t in rec["generated_tokens"])
