"""Weak labels from exact matching of known entity surfaces."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .corpus import LABEL_ORDER, Document, EntityLabel
from .metrics import normalize
from .textproc import tokenize_words

OUTSIDE = "O"
DEFAULT_GRID = tuple(range(100, 3001, 100))


@dataclass(frozen=True)
class Span:
    start: int
    end: int  # inclusive
    label: EntityLabel

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad span {self.start}..{self.end}")


@dataclass
class AlignedExample:
    doc: Document
    tags: list[str]
    matched: list[bool]

    def to_json(self) -> str:
        obj = json.loads(self.doc.to_json())
        obj["tags"] = self.tags
        obj["matched"] = self.matched
        return json.dumps(obj, ensure_ascii=False)


@dataclass
class CoverageCurve:
    grid: list[int]
    coverage: list[float]


def normalize_token(token: str) -> str:
    return normalize(token)


def kmp_find_all(pattern: Sequence[str], text: Sequence[str]) -> list[int]:
    """All start indices (overlaps included) where ``pattern`` occurs in ``text`` token-wise.

    Tokens are compared after :func:`normalize_token`.
    """
    if len(pattern) == 0:
        raise ValueError("kmp_find_all: empty pattern")
    if len(text) < len(pattern):
        return []
    codes: dict[str, int] = {}
    p = np.array([codes.setdefault(normalize_token(t), len(codes)) for t in pattern], dtype=np.int64)
    # text tokens absent from the pattern can never match
    t = np.array([codes.get(normalize_token(x), -1) for x in text], dtype=np.int64)
    return [int(i) for i in kernels.kmp_search(p, t)]


def naive_find_all(pattern: Sequence[str], text: Sequence[str]) -> list[int]:
    """Quadratic reference scan used to check :func:`kmp_find_all`."""
    p = [normalize_token(x) for x in pattern]
    t = [normalize_token(x) for x in text]
    m = len(p)
    return [i for i in range(len(t) - m + 1) if t[i:i + m] == p]


def entity_pattern(surface: str) -> list[str]:
    return [w for w in (normalize_token(t) for t in tokenize_words(surface)) if w]


def _content_view(tokens: Sequence[str]) -> tuple[list[str], list[int]]:
    """Normalized tokens with punctuation-only tokens dropped, plus their original positions."""
    norm, pos = [], []
    for i, tok in enumerate(tokens):
        n = normalize_token(tok)
        if n:
            norm.append(n)
            pos.append(i)
    return norm, pos


def find_entity_spans(doc: Document, labels: Iterable[EntityLabel] | None = None) -> list[list[tuple[int, int]]]:
    """Every occurrence (original token indices, inclusive) of every entity, ignoring punctuation tokens."""
    allowed = set(labels) if labels is not None else None
    norm, pos = _content_view(doc.source_tokens)
    out = []
    for ent in doc.entities:
        if allowed is not None and ent.label not in allowed:
            out.append([])
            continue
        pat = entity_pattern(ent.surface)
        if not pat or len(pat) > len(norm):
            out.append([])
            continue
        starts = kmp_find_all(pat, norm)
        out.append([(pos[s], pos[s + len(pat) - 1]) for s in starts])
    return out


def spans_to_tags(spans: Iterable[Span], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for sp in spans:
        lab = sp.label.value
        if sp.start == sp.end:
            tags[sp.start] = f"U-{lab}"
        else:
            tags[sp.start] = f"B-{lab}"
            for k in range(sp.start + 1, sp.end):
                tags[k] = f"I-{lab}"
            tags[sp.end] = f"L-{lab}"
    return tags


def tags_to_spans(tags: Sequence[str]) -> list[Span]:
    """Spans of a well-formed BILOU sequence; malformed fragments are ignored."""
    spans = []
    start = None
    cur = None
    for i, tag in enumerate(tags):
        if tag == OUTSIDE:
            start = cur = None
            continue
        prefix, lab = tag.split("-", 1)
        if prefix == "U":
            spans.append(Span(i, i, EntityLabel(lab)))
            start = cur = None
        elif prefix == "B":
            start, cur = i, lab
        elif prefix == "I":
            if cur != lab:
                start = cur = None
        elif prefix == "L":
            if cur == lab and start is not None:
                spans.append(Span(start, i, EntityLabel(lab)))
            start = cur = None
    return spans


def is_well_formed(tags: Sequence[str]) -> bool:
    open_label = None
    for tag in tags:
        if tag == OUTSIDE:
            if open_label is not None:
                return False
            continue
        prefix, _, lab = tag.partition("-")
        if prefix not in "BILU" or not lab:
            return False
        if prefix in ("B", "U"):
            if open_label is not None:
                return False
            if prefix == "B":
                open_label = lab
        elif prefix == "I":
            if open_label != lab:
                return False
        else:  # L
            if open_label != lab:
                return False
            open_label = None
    return open_label is None


def repair_tags(tags: Sequence[str]) -> list[str]:
    """Demote every tag that is not part of a complete B-I*-L run or a U to O."""
    out = [OUTSIDE] * len(tags)
    for sp in tags_to_spans(tags):
        for k, t in zip(range(sp.start, sp.end + 1), spans_to_tags([Span(0, sp.end - sp.start, sp.label)],
                                                                    sp.end - sp.start + 1)):
            out[k] = t
    return out


def align_entities(doc: Document, labels: Iterable[EntityLabel] | None = None) -> AlignedExample:
    """Tag every non-overlapping exact occurrence of each entity in BILOU.

    Overlaps between candidates are resolved in favour of the earlier start,
    then the longer span, then plaintiff before defendant before case number.
    """
    occurrences = find_entity_spans(doc, labels)
    cands = []
    for ent_idx, occ in enumerate(occurrences):
        lab = doc.entities[ent_idx].label
        for s, e in occ:
            cands.append((s, -(e - s), LABEL_ORDER[lab], ent_idx, e))
    cands.sort()
    taken = np.zeros(len(doc.source_tokens), dtype=bool)
    spans = []
    for s, _, _, ent_idx, e in cands:
        if taken[s:e + 1].any():
            continue
        taken[s:e + 1] = True
        spans.append(Span(s, e, doc.entities[ent_idx].label))
    tags = spans_to_tags(spans, len(doc.source_tokens))
    return AlignedExample(doc, tags, [bool(o) for o in occurrences])


def coverage_curve(corpus: Sequence[Document], grid: Sequence[int] = DEFAULT_GRID,
                   labels: Iterable[EntityLabel] | None = None) -> CoverageCurve:
    """Percentage of entities with at least one exact match ending inside the first ``g`` tokens."""
    if not corpus:
        raise ValueError("coverage_curve: empty corpus")
    grid = [int(g) for g in grid]
    if not grid or any(g <= 0 for g in grid) or any(a >= b for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly ascending positive cutoffs")
    allowed = set(labels) if labels is not None else None
    first_end = []
    for doc in corpus:
        for ent, occ in zip(doc.entities, find_entity_spans(doc, allowed)):
            if allowed is not None and ent.label not in allowed:
                continue
            first_end.append(min(e for _, e in occ) if occ else np.inf)
    ends = np.array(first_end, dtype=np.float64)
    total = max(len(ends), 1)
    cov = [100.0 * float((ends < g).sum()) / total for g in grid]
    return CoverageCurve(grid, cov)


def select_cutoff(curve: CoverageCurve, slope_threshold: float = 0.005) -> int:
    """Smallest grid point whose forward slope (percent per token) is at most the threshold."""
    g, c = curve.grid, curve.coverage
    if len(g) < 2:
        raise ValueError("select_cutoff: curve needs at least two points")
    for i in range(len(g) - 1):
        if (c[i + 1] - c[i]) / (g[i + 1] - g[i]) <= slope_threshold:
            return g[i]
    return g[-1]


def write_coverage_csv(path, curve: CoverageCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cutoff", "coverage_pct"])
        for g, c in zip(curve.grid, curve.coverage):
            w.writerow([g, repr(float(c))])


def read_aligned_jsonl(path) -> list[AlignedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(AlignedExample(Document.from_obj(obj), obj["tags"], obj.get("matched", [])))
    return out
