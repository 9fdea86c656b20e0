"""Entity-set scoring, edit distance, tolerance curves and copy statistics."""

from __future__ import annotations

import csv
import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels

_WS = re.compile(r"\s+")


def is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith(("P", "S")) and not ch.isalnum()


def normalize(surface: str) -> str:
    """Case-fold, drop punctuation, collapse whitespace.

    >>> normalize("Acme, Corp.")
    'acme corp'
    """
    folded = surface.casefold()
    kept = "".join(" " if ch.isspace() else ch for ch in folded if not is_punct(ch))
    return _WS.sub(" ", kept).strip()


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance."""
    if a == b:
        return 0
    ca = np.fromiter((ord(ch) for ch in a), dtype=np.int64, count=len(a))
    cb = np.fromiter((ord(ch) for ch in b), dtype=np.int64, count=len(b))
    return int(kernels.levenshtein_codes(ca, cb))


@dataclass
class EntitySetMetrics:
    precision: float
    recall: float
    f1: float
    relevant: int
    retrieved: int
    intersection: int
    per_label: dict[str, "EntitySetMetrics"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "relevant": self.relevant,
            "retrieved": self.retrieved,
            "intersection": self.intersection,
        }
        if self.per_label:
            out["per_label"] = {k: v.to_dict() for k, v in sorted(self.per_label.items())}
        return out


def _prf(rel: int, retr: int, inter: int) -> tuple[float, float, float]:
    p = 100.0 * inter / retr if retr else 0.0
    r = 100.0 * inter / rel if rel else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _entity_key(e) -> tuple[str, str]:
    if isinstance(e, tuple):
        label, surface = e
    else:
        label, surface = e.label, e.surface
    return str(getattr(label, "value", label)), normalize(surface)


def entity_prf(predicted: Mapping[str, Iterable], gold: Mapping[str, Iterable]) -> EntitySetMetrics:
    """Micro-averaged precision/recall/F1 (percentages) over per-document entity sets.

    Entities are ``Entity`` objects or ``(label, surface)`` pairs and are
    compared as ``(label, normalize(surface))``.
    """
    if set(predicted) != set(gold):
        missing = sorted(set(gold) ^ set(predicted))[:5]
        raise ValueError(f"entity_prf: document ids differ (e.g. {missing})")
    rel_c: Counter = Counter()
    retr_c: Counter = Counter()
    inter_c: Counter = Counter()
    for doc_id in sorted(gold):
        rel = {k for k in map(_entity_key, gold[doc_id]) if k[1]}
        retr = {k for k in map(_entity_key, predicted[doc_id]) if k[1]}
        for k in rel:
            rel_c[k[0]] += 1
        for k in retr:
            retr_c[k[0]] += 1
        for k in rel & retr:
            inter_c[k[0]] += 1
    per_label = {}
    for label in sorted(set(rel_c) | set(retr_c)):
        per_label[label] = EntitySetMetrics(*_prf(rel_c[label], retr_c[label], inter_c[label]),
                                            rel_c[label], retr_c[label], inter_c[label])
    rel, retr, inter = sum(rel_c.values()), sum(retr_c.values()), sum(inter_c.values())
    return EntitySetMetrics(*_prf(rel, retr, inter), rel, retr, inter, per_label)


@dataclass
class ToleranceCurve:
    tolerances: list[int]
    accuracy: list[float]

    def at(self, k: int) -> float:
        return self.accuracy[self.tolerances.index(k)]


def tolerance_curve(predictions: Sequence[str], truths: Sequence[str], k_max: int) -> ToleranceCurve:
    """accuracy(k) = fraction of documents whose prediction is within edit distance k of the truth."""
    if len(predictions) != len(truths):
        raise ValueError("tolerance_curve: predictions and truths differ in length")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    dists = np.array([levenshtein(p, t) for p, t in zip(predictions, truths)], dtype=np.int64)
    n = max(len(dists), 1)
    ks = list(range(k_max + 1))
    acc = [float((dists <= k).sum()) / n if len(dists) else 0.0 for k in ks]
    return ToleranceCurve(ks, acc)


@dataclass
class TraceStep:
    """What the decoder knew when it emitted one token."""

    token: str
    p_gen: float
    p_vocab: float
    copy_mass: float


def copy_rate(traces: Sequence[Sequence[TraceStep]] | None, markers: Iterable[str] = ()) -> float:
    """Fraction of emitted non-marker tokens whose copy component outweighed generation.

    A step counts as copied when ``(1 - p_gen) * copy_mass > p_gen * p_vocab``.
    """
    if traces is None:
        raise ValueError("copy_rate: no decode traces")
    markers = set(markers)
    total = copied = 0
    for trace in traces:
        for st in trace:
            if st.token in markers:
                continue
            total += 1
            if (1 - st.p_gen) * st.copy_mass > st.p_gen * st.p_vocab:
                copied += 1
    return copied / total if total else 0.0


def write_curve_csv(path, header: tuple[str, str], xs, ys) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y in zip(xs, ys):
            w.writerow([x, repr(float(y))])


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
