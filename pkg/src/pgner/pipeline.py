"""Glue between corpus documents, the two models and the scorers."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .align import align_entities
from .corpus import PARTY_LABELS, Document, Entity, EntityLabel
from .decode import DecodedDocument, DecodePenalties, decode_document
from .model import BiLSTMTagger, PointerGenerator, make_batch, tags_to_entities
from .parallel import parallel_map
from .textproc import WORD, Vocabulary, build_vocab, canonical_entities, encode_example, parse_generated, source_units

LABEL_SETS: dict[str, tuple[EntityLabel, ...]] = {
    "parties": PARTY_LABELS,
    "casenumber": (EntityLabel.CASENUMBER,),
    "all": (EntityLabel.PLAINTIFF, EntityLabel.DEFENDANT, EntityLabel.CASENUMBER),
}


def labels_for(name: str) -> tuple[EntityLabel, ...]:
    try:
        return LABEL_SETS[name]
    except KeyError:
        raise ValueError(f"labels must be one of {sorted(LABEL_SETS)}, got {name!r}") from None


def source_vocab(docs: Sequence[Document], cutoff: int, mode: str, max_size: int) -> Vocabulary:
    """Vocabulary over the truncated sources of the training documents."""
    return build_vocab((source_units(d.source_tokens, mode)[:cutoff] for d in docs), max_size, mode)


def encode_all(docs: Sequence[Document], vocab: Vocabulary, cutoff: int, mode: str = WORD,
               labels: Iterable[EntityLabel] = PARTY_LABELS):
    labels = tuple(labels)
    return [encode_example(d, vocab, cutoff, mode, labels) for d in docs]


def tagger_targets(docs: Sequence[Document], cutoff: int,
                   labels: Iterable[EntityLabel] = PARTY_LABELS) -> list[list[str]]:
    """Weak BILOU labels over the first ``cutoff`` tokens of each document."""
    labels = tuple(labels)
    out = []
    for d in docs:
        head = Document(d.id, d.source_tokens[:cutoff], d.entities)
        out.append(align_entities(head, labels).tags)
    return out


def gold_entities(docs: Sequence[Document], labels: Iterable[EntityLabel] = PARTY_LABELS) -> dict[str, list[Entity]]:
    labels = tuple(labels)
    return {d.id: canonical_entities(d.entities, labels) for d in docs}


def tagger_predict(model: BiLSTMTagger, docs: Sequence[Document], vocab: Vocabulary, cutoff: int,
                   batch_size: int = 32) -> dict[str, list[Entity]]:
    examples = encode_all(docs, vocab, cutoff, WORD)
    out: dict[str, list[Entity]] = {}
    for i in range(0, len(docs), batch_size):
        batch = make_batch(examples[i:i + batch_size], dtype=model.dtype, with_targets=False)
        for d, tags in zip(docs[i:i + batch_size], model.predict_tags(batch)):
            out[d.id] = tags_to_entities(tags, d.source_tokens[:cutoff])
    return out


def _decode_shard(args) -> list[DecodedDocument]:
    model, examples, vocab, penalties = args
    return [decode_document(model, ex, vocab, penalties) for ex in examples]


def pg_decode(model: PointerGenerator, docs: Sequence[Document], vocab: Vocabulary, cutoff: int,
              penalties: DecodePenalties, labels: Iterable[EntityLabel] = PARTY_LABELS,
              threads: int = 1) -> list[DecodedDocument]:
    examples = encode_all(docs, vocab, cutoff, model.config.mode, labels)
    if threads <= 1:
        return _decode_shard((model, examples, vocab, penalties))
    shards = [examples[k::threads] for k in range(threads)]
    parts = parallel_map(_decode_shard, [(model, s, vocab, penalties) for s in shards], threads, chunksize=1)
    # undo the round-robin split
    out: list[DecodedDocument | None] = [None] * len(examples)
    for k, part in enumerate(parts):
        for j, dec in enumerate(part):
            out[k + j * threads] = dec
    return out  # type: ignore[return-value]


def decoded_entities(decoded: Sequence[DecodedDocument], mode: str) -> dict[str, list[Entity]]:
    return {d.id: parse_generated(d.generated_tokens, mode) for d in decoded}


def first_surface(entities: Sequence[Entity], label: EntityLabel) -> str:
    for e in entities:
        if e.label == label:
            return e.surface
    return ""


def case_number_strings(pred: dict[str, list[Entity]], docs: Sequence[Document]) -> tuple[list[str], list[str]]:
    """Aligned (prediction, truth) case-number strings, case-folded."""
    preds, truths = [], []
    for d in docs:
        truth = first_surface(d.entities, EntityLabel.CASENUMBER)
        if not truth:
            continue
        preds.append(first_surface(pred.get(d.id, []), EntityLabel.CASENUMBER).casefold())
        truths.append(truth.casefold())
    return preds, truths


def oov_fraction(docs: Sequence[Document], vocab: Vocabulary, labels: Iterable[EntityLabel] = PARTY_LABELS,
                 mode: str = WORD) -> float:
    """Share of gold entity tokens missing from ``vocab``."""
    from .textproc import surface_units

    toks = [u for d in docs for e in canonical_entities(d.entities, tuple(labels))
            for u in surface_units(e.surface, mode)]
    if not toks:
        return 0.0
    return float(np.mean([u not in vocab for u in toks]))
