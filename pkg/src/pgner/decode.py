"""Beam search with length normalization, coverage penalty and bigram blocking.

The search talks to a :class:`DecoderSession`, which owns the encoded source
and advances a list of per-hypothesis decoder states by one step.  The
pointer-generator session is the real one; tests plug in tiny table-driven
sessions so the search can be compared with brute-force enumeration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .metrics import TraceStep
from .model import EncoderStates, PointerGenerator, make_batch
from .textproc import BOS_ID, CHAR, EOS_ID, SeqGenExample, Vocabulary, decode_ext_ids

LOG_FLOOR = 1e-12
DEFAULT_MAX_LEN = {"word": 64, CHAR: 32}


@dataclass(frozen=True)
class DecodePenalties:
    alpha: float = 0.9
    beta: float = 5.0
    beam_size: int = 10
    max_len: int = 64
    block_repeat_bigrams: bool = True
    exempt_markers: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")

    @classmethod
    def off(cls, beam_size: int = 1, max_len: int = 64) -> "DecodePenalties":
        return cls(alpha=0.0, beta=0.0, beam_size=beam_size, max_len=max_len, block_repeat_bigrams=False)


def length_penalty(length: int, alpha: float) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    return ((5.0 + length) ** alpha) / (6.0 ** alpha)


def coverage_penalty(coverage: np.ndarray, beta: float) -> float:
    cov = np.asarray(coverage, dtype=np.float64)
    if cov.size and cov.min() < 0:
        raise ValueError("coverage entries must be >= 0")
    if beta == 0:
        return 0.0
    return float(beta * np.maximum(cov - 1.0, 0.0).sum())


def hypothesis_score(log_prob: float, length: int, coverage: np.ndarray, p: DecodePenalties) -> float:
    return log_prob / length_penalty(length, p.alpha) - coverage_penalty(coverage, p.beta)


@dataclass
class StepOutput:
    probs: np.ndarray        # (K, Vext) final distribution
    attention: np.ndarray    # (K, L)
    states: list             # K new decoder states
    p_gen: np.ndarray        # (K,)
    p_vocab: np.ndarray      # (K, Vext) generator distribution, zero past V
    copy: np.ndarray         # (K, Vext) attention mass scattered onto extended ids


class DecoderSession(Protocol):
    source_length: int
    marker_ids: frozenset

    def start(self) -> Any: ...

    def step(self, prev_ids: np.ndarray, states: Sequence[Any]) -> StepOutput: ...


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    coverage: np.ndarray
    bigrams: frozenset
    state: Any = None
    finished: bool = False
    ended_with_eos: bool = False
    score: float = 0.0
    trace: list[tuple[float, float, float]] = field(default_factory=list)  # (p_gen, p_vocab, copy)

    @property
    def body(self) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS_ID and self.ended_with_eos \
            else list(self.tokens)


@dataclass
class BeamResult:
    hypotheses: list[Hypothesis]   # best first
    flagged: bool                  # True when nothing reached EOS within max_len

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _blocked_mask(hyp: Hypothesis, width: int, exempt: frozenset) -> np.ndarray | None:
    if not hyp.tokens or not hyp.bigrams:
        return None
    prev = hyp.tokens[-1]
    if prev in exempt:
        return None
    banned = [b for a, b in hyp.bigrams if a == prev and b not in exempt]
    if not banned:
        return None
    m = np.zeros(width, dtype=bool)
    m[banned] = True
    return m


def beam_search(session: DecoderSession, penalties: DecodePenalties) -> BeamResult:
    """Shrinking-beam search: candidates that emit EOS leave the beam as finished.

    Every step all live hypotheses are expanded over the whole extended
    vocabulary, candidates are ranked by the penalized score (ties: lower
    token id, then the better parent) and the top ``beam_size - #finished``
    are kept.  Length counts the EOS token.
    """
    p = penalties
    exempt = session.marker_ids if p.exempt_markers else frozenset()
    L = session.source_length
    live = [Hypothesis([], 0.0, np.zeros(L), frozenset(), session.start())]
    finished: list[Hypothesis] = []
    truncated: list[Hypothesis] = []
    for t in range(1, p.max_len + 1):
        need = p.beam_size - len(finished)
        if need <= 0 or not live:
            break
        prev = np.array([h.tokens[-1] if h.tokens else BOS_ID for h in live], dtype=np.int64)
        out = session.step(prev, [h.state for h in live])
        K, W = out.probs.shape
        logp = np.log(np.maximum(out.probs.astype(np.float64), LOG_FLOOR))
        cand_logp = np.array([h.log_prob for h in live])[:, None] + logp
        covs = np.stack([h.coverage for h in live]) + out.attention.astype(np.float64)
        cp = p.beta * np.maximum(covs - 1.0, 0.0).sum(axis=1) if p.beta else np.zeros(K)
        scores = cand_logp / length_penalty(t, p.alpha) - cp[:, None]
        if p.block_repeat_bigrams:
            for k, h in enumerate(live):
                m = _blocked_mask(h, W, exempt)
                if m is not None:
                    scores[k, m] = -np.inf
        flat = scores.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        if finite.size == 0:
            break
        if finite.size > 4 * need:
            kth = np.partition(flat[finite], finite.size - need)[finite.size - need]
            finite = finite[flat[finite] >= kth]
        beam_of, tok_of = np.divmod(finite, W)
        order = np.lexsort((beam_of, tok_of, -flat[finite]))[:need]
        new_live = []
        for j in order:
            k, y = int(beam_of[j]), int(tok_of[j])
            h = live[k]
            bigrams = h.bigrams
            if h.tokens and not (h.tokens[-1] in exempt or y in exempt):
                bigrams = bigrams | {(h.tokens[-1], y)}
            nh = Hypothesis(h.tokens + [y], float(cand_logp[k, y]), covs[k], bigrams, out.states[k],
                            score=float(flat[finite[j]]),
                            trace=h.trace + [(float(out.p_gen[k]), float(out.p_vocab[k, y]),
                                              float(out.copy[k, y]))])
            if y == EOS_ID:
                nh.finished = nh.ended_with_eos = True
                finished.append(nh)
            elif t == p.max_len:
                nh.finished = True
                truncated.append(nh)
            else:
                new_live.append(nh)
        live = new_live
    key = lambda h: (-h.score, h.tokens)
    if finished:
        return BeamResult(sorted(finished, key=key), False)
    rest = truncated or live
    if not rest:
        raise RuntimeError("beam_search: every candidate was blocked")
    return BeamResult(sorted(rest, key=key), True)


def greedy_decode(session: DecoderSession, max_len: int) -> list[int]:
    """Argmax tokens until EOS (excluded) or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = session.start()
    prev = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        step = session.step(np.array([prev]), [state])
        y = int(np.argmax(step.probs[0]))
        if y == EOS_ID:
            break
        out.append(y)
        prev, state = y, step.states[0]
    return out


# ----------------------------------------------------- pointer-generator session


class PointerGeneratorSession:
    """Decoding view of one source document under a trained :class:`PointerGenerator`."""

    def __init__(self, model: PointerGenerator, example: SeqGenExample, marker_ids: Sequence[int] = ()):
        self.model = model
        self.example = example
        self.marker_ids = frozenset(int(i) for i in marker_ids)
        batch = make_batch([example], dtype=model.dtype, with_targets=False)
        with ad.no_grad():
            self._enc = model.encode(batch)
        self.source_length = batch.src.shape[1]
        self.n_oov = len(example.oov_list)
        self.width = model.config.vocab_size + self.n_oov
        self._tiled: dict[int, EncoderStates] = {}

    def _enc_for(self, K: int) -> EncoderStates:
        if K not in self._tiled:
            e = self._enc
            rep = lambda a: np.repeat(a, K, axis=0)
            self._tiled[K] = EncoderStates(ad.constant(rep(e.states.value)), ad.constant(rep(e.keys.value)),
                                           rep(e.mask), rep(e.neg_mask), rep(e.src_ext), [], [])
        return self._tiled[K]

    def start(self):
        e = self._enc
        ctx = np.zeros(2 * self.model.config.hidden_dim, dtype=self.model.dtype)
        return ([h.value[0] for h in e.init_h], [c.value[0] for c in e.init_c], ctx)

    def step(self, prev_ids: np.ndarray, states: Sequence[Any]) -> StepOutput:
        from .model import DecoderState

        K = len(states)
        layers = self.model.config.decoder_layers
        h = [ad.constant(np.stack([s[0][k] for s in states])) for k in range(layers)]
        c = [ad.constant(np.stack([s[1][k] for s in states])) for k in range(layers)]
        ctx = ad.constant(np.stack([s[2] for s in states]))
        enc = self._enc_for(K)
        with ad.no_grad():
            st = self.model.decode_step(np.asarray(prev_ids, dtype=np.int64), DecoderState(h, c, ctx), enc)
        attn = st.attention.value.astype(np.float64)
        p_gen = st.p_gen.value.reshape(K).astype(np.float64)
        pv = np.zeros((K, self.width))
        pv[:, :self.model.config.vocab_size] = st.p_vocab.value
        copy = np.zeros((K, self.width))
        if self.model.config.copy_enabled:
            kernels.scatter_add_rows(copy, enc.src_ext, attn)
            probs = p_gen[:, None] * pv + (1.0 - p_gen[:, None]) * copy
        else:
            probs = pv
        new_states = [([x.value[k] for x in st.state.h], [x.value[k] for x in st.state.c], st.context.value[k])
                      for k in range(K)]
        return StepOutput(probs, attn, new_states, p_gen, pv, copy)


@dataclass
class DecodedDocument:
    id: str
    generated_tokens: list[str]
    score: float
    copy_fraction: float
    flagged: bool
    trace: list[TraceStep]

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "generated_tokens": self.generated_tokens,
                           "score": self.score, "copy_fraction": self.copy_fraction}, ensure_ascii=False)


def decode_document(model: PointerGenerator, example: SeqGenExample, vocab: Vocabulary,
                    penalties: DecodePenalties) -> DecodedDocument:
    session = PointerGeneratorSession(model, example, vocab.marker_ids())
    res = beam_search(session, penalties)
    best = res.best
    toks = decode_ext_ids(best.tokens, vocab, example.oov_list)
    trace = [TraceStep(tok, g, pv, cm) for tok, (g, pv, cm) in zip(toks, best.trace)]
    body = decode_ext_ids(best.body, vocab, example.oov_list)
    markers = {vocab.token_of[i] for i in vocab.marker_ids()}
    counted = [s for s in trace[:len(body)] if s.token not in markers]
    copied = sum(1 for s in counted if (1 - s.p_gen) * s.copy_mass > s.p_gen * s.p_vocab)
    frac = copied / len(counted) if counted else 0.0
    score = best.score if math.isfinite(best.score) else float("nan")
    return DecodedDocument(example.id, body, score, frac, res.flagged, trace[:len(body)])
