"""Pointer-generator encoder-decoder and a BiLSTM softmax tagger.

Both models keep their parameters as named :class:`~pgner.autodiff.Tensor`
leaves and rebuild the graph on every forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .align import OUTSIDE, Span, repair_tags, tags_to_spans
from .corpus import PARTY_LABELS, Entity
from .textproc import CHAR, EOS_ID, PAD_ID, UNK_ID, WORD, SeqGenExample

NEG_INF = -1e9
TAGS = [OUTSIDE] + [f"{p}-{lab.value}" for lab in PARTY_LABELS for p in "BILU"]
TAG_ID = {t: i for i, t in enumerate(TAGS)}


@dataclass
class PointerGenConfig:
    vocab_size: int
    embedding_dim: int = 32
    hidden_dim: int = 64
    encoder_layers: int = 1
    decoder_layers: int = 1
    mode: str = WORD
    copy_enabled: bool = True
    dropout_prob: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.vocab_size, self.embedding_dim, self.hidden_dim, self.encoder_layers,
               self.decoder_layers) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.mode not in (WORD, CHAR):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == CHAR:
            self.copy_enabled = False
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")

    @classmethod
    def desk(cls, vocab_size: int, **kw) -> "PointerGenConfig":
        return cls(vocab_size, **{"embedding_dim": 32, "hidden_dim": 64, "encoder_layers": 1, **kw})

    @classmethod
    def full(cls, vocab_size: int, **kw) -> "PointerGenConfig":
        return cls(vocab_size, **{"embedding_dim": 100, "hidden_dim": 512, "encoder_layers": 2, **kw})


@dataclass
class TaggerConfig:
    vocab_size: int
    embedding_dim: int = 32
    hidden_dim: int = 64
    layers: int = 1
    dropout_prob: float = 0.0
    dtype: str = "float32"

    @property
    def n_labels(self) -> int:
        return len(TAGS)


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> ad.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = ad.parameter(value.astype(self.dtype), name=name)
        self.params[name] = t
        return t

    def named_parameters(self):
        return sorted(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(self.params))[:5]}")
        for k, v in state.items():
            p = self.params[k]
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = np.ascontiguousarray(v, dtype=self.dtype)

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))


def _init(rng, shape, scale=0.08):
    return rng.uniform(-scale, scale, size=shape)


def _lstm_params(module: Module, prefix: str, d_in: int, h: int, rng) -> tuple:
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0  # forget gate
    return (module._add(f"{prefix}.Wx", _init(rng, (d_in, 4 * h))),
            module._add(f"{prefix}.Wh", _init(rng, (h, 4 * h))),
            module._add(f"{prefix}.b", b))


def _bilstm(module: Module, x: ad.Tensor, mask_tm: np.ndarray, layers: int, prefix: str,
            dropout: float, rng) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Stacked BiLSTM over time-major ``x``; returns (states (L,B,2H), last fwd h, first bwd h)."""
    p = module.params
    out = x
    fwd = bwd = None
    for k in range(layers):
        fwd = ad.lstm_sequence(out, p[f"{prefix}{k}.fwd.Wx"], p[f"{prefix}{k}.fwd.Wh"],
                               p[f"{prefix}{k}.fwd.b"], mask_tm, reverse=False)
        bwd = ad.lstm_sequence(out, p[f"{prefix}{k}.bwd.Wx"], p[f"{prefix}{k}.bwd.Wh"],
                               p[f"{prefix}{k}.bwd.b"], mask_tm, reverse=True)
        out = ad.concat([fwd, bwd], axis=2)
        if dropout > 0:
            out = ad.dropout(out, dropout, rng)
    L = x.shape[0]
    return out, ad.index0(fwd, L - 1), ad.index0(bwd, 0)


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: list[str]
    src: np.ndarray          # (B, L) in-vocab ids, PAD beyond length
    src_ext: np.ndarray      # (B, L) extended ids
    mask: np.ndarray         # (B, L) 1.0 on real positions
    n_oov: int
    tgt: np.ndarray | None = None       # (B, T) extended ids, PAD beyond length
    tgt_mask: np.ndarray | None = None  # (B, T)

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(examples: Sequence[SeqGenExample], dtype="float32", with_targets: bool = True) -> Batch:
    B = len(examples)
    L = max(len(e.source_ids) for e in examples)
    src = np.full((B, L), PAD_ID, dtype=np.int64)
    ext = np.full((B, L), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, L), dtype=dtype)
    for r, e in enumerate(examples):
        n = len(e.source_ids)
        src[r, :n] = e.source_ids
        ext[r, :n] = e.source_ext_ids
        mask[r, :n] = 1
    batch = Batch([e.id for e in examples], src, ext, mask, max(len(e.oov_list) for e in examples))
    if with_targets:
        T = max(len(e.target_ids) for e in examples)
        tgt = np.full((B, T), PAD_ID, dtype=np.int64)
        tmask = np.zeros((B, T), dtype=dtype)
        for r, e in enumerate(examples):
            tgt[r, :len(e.target_ids)] = e.target_ids
            tmask[r, :len(e.target_ids)] = 1
        batch.tgt, batch.tgt_mask = tgt, tmask
    return batch


# ---------------------------------------------------------- pointer-generator


@dataclass
class EncoderStates:
    states: ad.Tensor        # (B, L, 2H) batch-major
    keys: ad.Tensor          # (B, L, A) attention keys, bias included
    mask: np.ndarray         # (B, L)
    neg_mask: np.ndarray     # (B, L) 0 or NEG_INF
    src_ext: np.ndarray      # (B, L)
    init_h: list[ad.Tensor]
    init_c: list[ad.Tensor]


@dataclass
class DecoderState:
    h: list[ad.Tensor]
    c: list[ad.Tensor]
    context: ad.Tensor       # previous attention context (B, 2H)


@dataclass
class DecoderStep:
    state: DecoderState
    attention: ad.Tensor     # (B, L)
    context: ad.Tensor       # (B, 2H)
    p_gen: ad.Tensor         # (B, 1)
    p_vocab: ad.Tensor       # (B, V)


class PointerGenerator(Module):
    def __init__(self, config: PointerGenConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        c = config
        E, H, V = c.embedding_dim, c.hidden_dim, c.vocab_size
        self._add("emb", _init(rng, (V, E)))
        d_in = E
        for k in range(c.encoder_layers):
            _lstm_params(self, f"enc{k}.fwd", d_in, H, rng)
            _lstm_params(self, f"enc{k}.bwd", d_in, H, rng)
            d_in = 2 * H
        for k in range(c.decoder_layers):
            self._add(f"bridge{k}.Wh", _init(rng, (2 * H, H)))
            self._add(f"bridge{k}.bh", np.zeros(H))
            self._add(f"bridge{k}.Wc", _init(rng, (2 * H, H)))
            self._add(f"bridge{k}.bc", np.zeros(H))
            _lstm_params(self, f"dec{k}", E + 2 * H if k == 0 else H, H, rng)
        self._add("att.Wh", _init(rng, (2 * H, H)))
        self._add("att.b", np.zeros(H))
        self._add("att.Ws", _init(rng, (H, H)))
        self._add("att.v", _init(rng, (H,)))
        self._add("out.W", _init(rng, (3 * H, V)))
        self._add("out.b", np.zeros(V))
        if c.copy_enabled:
            self._add("ptr.W", _init(rng, (2 * H + H + E, 1)))
            self._add("ptr.b", np.zeros(1))

    # -- encoder

    def encode(self, batch: Batch, rng=None) -> EncoderStates:
        p, c = self.params, self.config
        if batch.src.size == 0 or batch.src.shape[1] == 0:
            raise ValueError("encode: empty source")
        if batch.src.max() >= c.vocab_size or batch.src.min() < 0:
            raise IndexError("encode: source id outside the vocabulary")
        B, L = batch.src.shape
        H = c.hidden_dim
        drop = c.dropout_prob if rng is not None else 0.0
        x = ad.gather(p["emb"], batch.src.T)
        if drop > 0:
            x = ad.dropout(x, drop, rng)
        mask_tm = batch.mask.T
        states_tm, last_f, first_b = _bilstm(self, x, mask_tm, c.encoder_layers, "enc", drop, rng)
        states = ad.transpose01(states_tm)
        keys = ad.reshape(ad.linear(ad.reshape(states, (B * L, 2 * H)), p["att.Wh"], p["att.b"]), (B, L, H))
        final = ad.concat([last_f, first_b], axis=1)
        init_h, init_c = [], []
        for k in range(c.decoder_layers):
            init_h.append(ad.tanh(ad.linear(final, p[f"bridge{k}.Wh"], p[f"bridge{k}.bh"])))
            init_c.append(ad.linear(final, p[f"bridge{k}.Wc"], p[f"bridge{k}.bc"]))
        neg = np.where(batch.mask > 0, 0.0, NEG_INF).astype(self.dtype)
        return EncoderStates(states, keys, batch.mask, neg, batch.src_ext, init_h, init_c)

    def initial_state(self, enc: EncoderStates) -> DecoderState:
        B = enc.states.shape[0]
        ctx = ad.constant(np.zeros((B, 2 * self.config.hidden_dim), dtype=self.dtype))
        return DecoderState(list(enc.init_h), list(enc.init_c), ctx)

    # -- one decoder step

    def attend(self, s_t: ad.Tensor, enc: EncoderStates) -> tuple[ad.Tensor, ad.Tensor]:
        """Additive attention: returns (weights (B, L), context (B, 2H))."""
        p = self.params
        B, L, _ = enc.states.shape
        query = ad.matmul(s_t, p["att.Ws"])
        scores = ad.add_const(ad.additive_scores(enc.keys, query, p["att.v"]), enc.neg_mask)
        a = ad.softmax(scores, axis=1)
        ctx = ad.reshape(ad.matmul(ad.reshape(a, (B, 1, L)), enc.states), (B, enc.states.shape[2]))
        return a, ctx

    def decode_step(self, prev_ids: np.ndarray, state: DecoderState, enc: EncoderStates,
                    rng=None) -> DecoderStep:
        p, c = self.params, self.config
        H = c.hidden_dim
        prev = np.where(prev_ids >= c.vocab_size, UNK_ID, prev_ids)
        x = ad.gather(p["emb"], prev)
        inp = ad.concat([x, state.context], axis=1)
        hs, cs = [], []
        for k in range(c.decoder_layers):
            hc = ad.lstm_cell(inp, state.h[k], state.c[k], p[f"dec{k}.Wx"], p[f"dec{k}.Wh"], p[f"dec{k}.b"])
            h = ad.slice_last(hc, 0, H)
            hs.append(h)
            cs.append(ad.slice_last(hc, H, 2 * H))
            inp = h
        s_t = hs[-1]
        a, ctx = self.attend(s_t, enc)
        feat = ad.concat([s_t, ctx], axis=1)
        if rng is not None and c.dropout_prob > 0:
            feat = ad.dropout(feat, c.dropout_prob, rng)
        p_vocab = ad.softmax(ad.linear(feat, p["out.W"], p["out.b"]), axis=1)
        if c.copy_enabled:
            p_gen = ad.sigmoid(ad.linear(ad.concat([ctx, s_t, x], axis=1), p["ptr.W"], p["ptr.b"]))
        else:
            p_gen = ad.constant(np.ones((prev.shape[0], 1), dtype=self.dtype))
        return DecoderStep(DecoderState(hs, cs, ctx), a, ctx, p_gen, p_vocab)

    def final_distribution(self, step: DecoderStep, src_ext: np.ndarray, n_oov: int) -> ad.Tensor:
        """Mixture over the extended vocabulary, built with ``scatter_add``."""
        V = self.config.vocab_size
        if not self.config.copy_enabled:
            if n_oov == 0:
                return step.p_vocab
            B = step.p_vocab.shape[0]
            return ad.concat([step.p_vocab, ad.constant(np.zeros((B, n_oov), dtype=self.dtype))], axis=1)
        B = step.p_vocab.shape[0]
        Vext = V + n_oov
        pv = step.p_vocab
        if n_oov:
            pv = ad.concat([pv, ad.constant(np.zeros((B, n_oov), dtype=self.dtype))], axis=1)
        copy = ad.scatter_add(step.attention, src_ext, Vext)
        g = ad.expand(ad.reshape(step.p_gen, (B,)), 1, Vext)
        return ad.add(ad.mul(g, pv), ad.mul(ad.one_minus(g), copy))

    def gold_probability(self, step: DecoderStep, src_ext: np.ndarray, target: np.ndarray) -> ad.Tensor:
        """Probability of ``target`` (B,) under the mixture, without materializing it."""
        V = self.config.vocab_size
        in_vocab = target < V
        pv = ad.mul_const(ad.pick(step.p_vocab, np.where(in_vocab, target, UNK_ID)),
                          in_vocab.astype(self.dtype))
        if not self.config.copy_enabled:
            return pv
        B = target.shape[0]
        hits = (src_ext == target[:, None]).astype(self.dtype)
        copy = ad.sum(ad.mul_const(step.attention, hits), axis=1)
        g = ad.reshape(step.p_gen, (B,))
        return ad.add(ad.mul(g, pv), ad.mul(ad.one_minus(g), copy))

    # -- training objective

    def nll(self, batch: Batch, rng=None) -> ad.Tensor:
        """Mean over examples of the per-token negative log-likelihood, teacher forced."""
        enc = self.encode(batch, rng)
        state = self.initial_state(enc)
        B, T = batch.tgt.shape
        tgt = batch.tgt
        if not self.config.copy_enabled:
            tgt = np.where(tgt >= self.config.vocab_size, UNK_ID, tgt)
        lengths = batch.tgt_mask.sum(axis=1)
        weights = batch.tgt_mask / (lengths[:, None] * B)
        prev = np.full(B, 1, dtype=np.int64)  # BOS
        total = None
        for t in range(T):
            step = self.decode_step(prev, state, enc, rng)
            prob = self.gold_probability(step, batch.src_ext, tgt[:, t])
            term = ad.sum(ad.mul_const(ad.log(prob), -weights[:, t]))
            total = term if total is None else ad.add(total, term)
            state = step.state
            prev = tgt[:, t]
        return total


# ------------------------------------------------------------------- tagger


class BiLSTMTagger(Module):
    def __init__(self, config: TaggerConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        E, H = config.embedding_dim, config.hidden_dim
        self._add("emb", _init(rng, (config.vocab_size, E)))
        d_in = E
        for k in range(config.layers):
            _lstm_params(self, f"enc{k}.fwd", d_in, H, rng)
            _lstm_params(self, f"enc{k}.bwd", d_in, H, rng)
            d_in = 2 * H
        self._add("out.W", _init(rng, (2 * H, config.n_labels)))
        self._add("out.b", np.zeros(config.n_labels))

    def forward(self, batch: Batch, rng=None) -> ad.Tensor:
        """Per-token label distributions, shape (B * L, 9), batch-major rows."""
        p, c = self.params, self.config
        if batch.src.size == 0:
            raise ValueError("tagger: empty source")
        B, L = batch.src.shape
        drop = c.dropout_prob if rng is not None else 0.0
        x = ad.gather(p["emb"], batch.src.T)
        if drop > 0:
            x = ad.dropout(x, drop, rng)
        states, _, _ = _bilstm(self, x, batch.mask.T, c.layers, "enc", drop, rng)
        flat = ad.reshape(ad.transpose01(states), (B * L, 2 * c.hidden_dim))
        return ad.softmax(ad.linear(flat, p["out.W"], p["out.b"]), axis=1)

    def nll(self, batch: Batch, tags: np.ndarray, rng=None) -> ad.Tensor:
        """Mean per-token NLL over real positions; ``tags`` is (B, L) label ids."""
        probs = self.forward(batch, rng)
        w = batch.mask.reshape(-1)
        w = w / max(w.sum(), 1.0)
        picked = ad.pick(probs, tags.reshape(-1))
        return ad.sum(ad.mul_const(ad.log(picked), -w))

    def predict_tags(self, batch: Batch) -> list[list[str]]:
        with ad.no_grad():
            probs = self.forward(batch).value
        B, L = batch.src.shape
        best = probs.reshape(B, L, -1).argmax(axis=2)
        out = []
        for r in range(B):
            n = int(batch.mask[r].sum())
            out.append(repair_tags([TAGS[i] for i in best[r, :n]]))
        return out


def tags_to_entities(tags: Sequence[str], units: Sequence[str]) -> list[Entity]:
    ents = []
    for sp in tags_to_spans(tags):
        text = " ".join(units[sp.start:sp.end + 1]).strip()
        if text:
            ents.append(Entity(sp.label, text))
    return ents
