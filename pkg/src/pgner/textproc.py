"""Tokenization, vocabularies, target linearization and extended-vocabulary encoding.

Model inputs are case-folded tokens ("units"): words in word mode, single
characters in char mode with :data:`SPACE` standing for a word break.
Punctuation inside a token is kept, so case numbers such as ``1:16cv00678``
survive as one word unit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import LABEL_ORDER, PARTY_LABELS, Document, Entity, EntityLabel
from .metrics import is_punct, normalize

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPACE = "<sp>"
MARKERS = {lab: f"<{lab.value}>" for lab in EntityLabel}
MARKER_LABEL = {v: k for k, v in MARKERS.items()}
SPECIALS = (PAD, BOS, EOS, UNK, MARKERS[EntityLabel.PLAINTIFF], MARKERS[EntityLabel.DEFENDANT],
            MARKERS[EntityLabel.CASENUMBER], SPACE)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

WORD, CHAR = "word", "char"
DEFAULT_CUTOFF = {WORD: 1500, CHAR: 4000}


def _check_mode(mode: str) -> None:
    if mode not in (WORD, CHAR):
        raise ValueError(f"mode must be 'word' or 'char', got {mode!r}")


def tokenize_words(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation into one-character tokens.

    >>> tokenize_words("Acme Corp., Inc.")
    ['Acme', 'Corp', '.', ',', 'Inc', '.']
    """
    out: list[str] = []
    for piece in text.split():
        lead: list[str] = []
        trail: list[str] = []
        i, j = 0, len(piece)
        while i < j and is_punct(piece[i]):
            lead.append(piece[i])
            i += 1
        while j > i and is_punct(piece[j - 1]):
            trail.append(piece[j - 1])
            j -= 1
        out.extend(lead)
        if i < j:
            out.append(piece[i:j])
        out.extend(reversed(trail))
    return out


def source_units(tokens: Sequence[str], mode: str) -> list[str]:
    _check_mode(mode)
    folded = [t.casefold() for t in tokens]
    if mode == WORD:
        return folded
    units: list[str] = []
    for k, tok in enumerate(folded):
        if k:
            units.append(SPACE)
        units.extend(tok)
    return units


def surface_units(surface: str, mode: str) -> list[str]:
    return source_units(tokenize_words(surface), mode)


class Vocabulary:
    """Token <-> id map with the special symbols at fixed low ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special symbols")
        self.token_of: list[str] = list(tokens)
        self.id_of: dict[str, int] = {}
        for i, t in enumerate(self.token_of):
            if t in self.id_of:
                raise ValueError(f"duplicate vocabulary entry {t!r}")
            self.id_of[t] = i
        self.specials = {t: self.id_of[t] for t in SPECIALS}

    def __len__(self) -> int:
        return len(self.token_of)

    @property
    def size(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def get(self, token: str) -> int:
        return self.id_of.get(token, UNK_ID)

    def marker_ids(self) -> set[int]:
        return {self.id_of[m] for m in MARKERS.values()}

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.token_of).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.token_of:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def build_vocab(sequences: Iterable[Sequence[str]], max_size: int, mode: str = WORD) -> Vocabulary:
    """Keep the most frequent units (ties broken lexicographically) after the specials."""
    _check_mode(mode)
    if max_size <= len(SPECIALS):
        raise ValueError(f"max_size must exceed the {len(SPECIALS)} special symbols")
    counts: Counter = Counter()
    seen_any = False
    for seq in sequences:
        seen_any = True
        counts.update(seq)
    if not seen_any:
        raise ValueError("build_vocab: empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocabulary(list(SPECIALS) + keep)


def canonical_entities(entities: Sequence[Entity], labels: Iterable[EntityLabel] = PARTY_LABELS,
                       dedupe: bool = True) -> list[Entity]:
    """Label order (plaintiffs, defendants, case number), document order within a label."""
    labels = set(labels)
    picked = [e for e in entities if e.label in labels]
    picked = sorted(picked, key=lambda e: LABEL_ORDER[e.label])  # stable
    if not dedupe:
        return picked
    seen = set()
    out = []
    for e in picked:
        key = (e.label, normalize(e.surface))
        if key not in seen:
            seen.add(key)
            out.append(e)
    return out


def linearize_targets(entities: Sequence[Entity], mode: str = WORD,
                      labels: Iterable[EntityLabel] | None = None, dedupe: bool = True,
                      eos: bool = False) -> list[str]:
    """``<label> tok tok <label> tok ...`` in canonical entity order."""
    _check_mode(mode)
    if labels is None:
        labels = [e.label for e in entities]
    out: list[str] = []
    for e in canonical_entities(entities, labels, dedupe):
        out.append(MARKERS[e.label])
        out.extend(surface_units(e.surface, mode))
    if eos:
        out.append(EOS)
    return out


def parse_generated(tokens: Sequence[str], mode: str = WORD) -> list[Entity]:
    """Inverse of :func:`linearize_targets`; tolerant of garbage."""
    _check_mode(mode)
    entities: list[Entity] = []
    label: EntityLabel | None = None
    buf: list[str] = []

    def flush():
        if label is None:
            return
        if mode == WORD:
            text = " ".join(buf)
        else:
            text = "".join(" " if u == SPACE else u for u in buf)
        text = " ".join(text.split())
        if text:
            entities.append(Entity(label, text))

    for tok in tokens:
        if tok == EOS:
            break
        if tok in (PAD, BOS):
            continue
        if tok in MARKER_LABEL:
            flush()
            label = MARKER_LABEL[tok]
            buf = []
        elif label is not None:
            buf.append(tok)
    flush()
    return entities


@dataclass
class SeqGenExample:
    id: str
    source_ids: np.ndarray
    source_ext_ids: np.ndarray
    oov_list: list[str]
    target_ids: np.ndarray
    source_truncated_at: int

    @property
    def ext_size_needed(self) -> int:
        return len(self.oov_list)


def encode_example(doc: Document, vocab: Vocabulary, cutoff: int, mode: str = WORD,
                   labels: Iterable[EntityLabel] = PARTY_LABELS, dedupe: bool = True) -> SeqGenExample:
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    units = source_units(doc.source_tokens, mode)[:cutoff]
    V = vocab.size
    oov: dict[str, int] = {}
    src = np.empty(len(units), dtype=np.int64)
    ext = np.empty(len(units), dtype=np.int64)
    for k, u in enumerate(units):
        i = vocab.id_of.get(u)
        if i is None:
            src[k] = UNK_ID
            if u not in oov:
                oov[u] = V + len(oov)
            ext[k] = oov[u]
        else:
            src[k] = ext[k] = i
    target = linearize_targets(doc.entities, mode, labels, dedupe, eos=True)
    tgt = np.array([vocab.id_of.get(t, oov.get(t, UNK_ID)) for t in target], dtype=np.int64)
    return SeqGenExample(doc.id, src, ext, list(oov), tgt, cutoff)


def decode_ext_ids(ids: Iterable[int], vocab: Vocabulary, oov_list: Sequence[str]) -> list[str]:
    V = vocab.size
    out = []
    for i in ids:
        i = int(i)
        if i < V:
            out.append(vocab.token_of[i])
        elif i - V < len(oov_list):
            out.append(oov_list[i - V])
        else:
            out.append(UNK)
    return out


# ------------------------------------------------------------- binary datasets

_MAGIC = b"PGDS"


def _write_ids(fh, arr) -> None:
    arr = np.asarray(arr, dtype="<i4")
    fh.write(struct.pack("<I", arr.size))
    fh.write(arr.tobytes())


def _read_ids(fh) -> np.ndarray:
    (n,) = struct.unpack("<I", fh.read(4))
    data = fh.read(4 * n)
    if len(data) != 4 * n:
        raise ValueError("truncated encoded dataset")
    return np.frombuffer(data, dtype="<i4").astype(np.int64)


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def write_encoded(path, examples: Sequence[SeqGenExample], vocab: Vocabulary, mode: str) -> None:
    """Length-prefixed little-endian int32 records plus a ``<path>.json`` sidecar."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(examples)))
        for ex in examples:
            _write_str(fh, ex.id)
            _write_ids(fh, ex.source_ids)
            _write_ids(fh, ex.source_ext_ids)
            _write_ids(fh, ex.target_ids)
            fh.write(struct.pack("<I", len(ex.oov_list)))
            for t in ex.oov_list:
                _write_str(fh, t)
            fh.write(struct.pack("<I", ex.source_truncated_at))
    cutoffs = sorted({ex.source_truncated_at for ex in examples})
    meta = {"mode": mode, "cutoff": cutoffs[0] if len(cutoffs) == 1 else cutoffs,
            "vocab_hash": vocab.hash(), "vocab_size": vocab.size, "records": len(examples)}
    with open(str(path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_encoded(path, vocab: Vocabulary | None = None) -> tuple[list[SeqGenExample], dict]:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if vocab is not None and meta["vocab_hash"] != vocab.hash():
        raise ValueError("encoded dataset was built with a different vocabulary")
    out = []
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not an encoded dataset")
        (n,) = struct.unpack("<I", fh.read(4))
        for _ in range(n):
            doc_id = _read_str(fh)
            src = _read_ids(fh)
            ext = _read_ids(fh)
            tgt = _read_ids(fh)
            (k,) = struct.unpack("<I", fh.read(4))
            oov = [_read_str(fh) for _ in range(k)]
            (cut,) = struct.unpack("<I", fh.read(4))
            out.append(SeqGenExample(doc_id, src, ext, oov, tgt, cut))
    return out, meta
