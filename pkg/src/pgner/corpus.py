"""Synthetic complaint-like documents with OCR-style corruption.

Each document has a caption header (court lines, then a two-column block
whose left column holds the parties and whose right column holds the case
number and docket text), an introductory paragraph that usually names the
parties again, and Zipf-distributed filler body text.

Entity surfaces are written down before any corruption, so the source can
disagree with the annotation in three ways: character confusions, a right
column token landing inside a party name, and a shortened name variant.

Generation of document ``i`` depends only on ``(config, i)``: structure and
noise use separate streams derived from ``(rng_seed, i)``, so raising a
noise probability only ever adds corruption to an otherwise identical
document.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Sequence

import numpy as np


class ConfigError(ValueError):
    pass


class EntityLabel(str, enum.Enum):
    PLAINTIFF = "plaintiff"
    DEFENDANT = "defendant"
    CASENUMBER = "casenumber"

    def __str__(self):
        return self.value


PARTY_LABELS = (EntityLabel.PLAINTIFF, EntityLabel.DEFENDANT)
LABEL_ORDER = {EntityLabel.PLAINTIFF: 0, EntityLabel.DEFENDANT: 1, EntityLabel.CASENUMBER: 2}


@dataclass(frozen=True)
class Entity:
    label: EntityLabel
    surface: str

    def __post_init__(self):
        if not isinstance(self.label, EntityLabel):
            object.__setattr__(self, "label", EntityLabel(self.label))
        if not self.surface.strip():
            raise ValueError("entity surface must be non-empty")


@dataclass
class Document:
    id: str
    source_tokens: list[str]
    entities: list[Entity]
    truth_spans: list[tuple[int, int, int]] | None = None

    def __post_init__(self):
        if not self.source_tokens:
            raise ValueError(f"{self.id}: document has no tokens")

    def validate(self) -> None:
        labels = {e.label for e in self.entities}
        if EntityLabel.PLAINTIFF not in labels or EntityLabel.DEFENDANT not in labels:
            raise ValueError(f"{self.id}: needs at least one plaintiff and one defendant")
        for ent, start, end in self.truth_spans or ():
            if not (0 <= ent < len(self.entities) and 0 <= start <= end < len(self.source_tokens)):
                raise ValueError(f"{self.id}: truth span {(ent, start, end)} out of range")

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "source_tokens": self.source_tokens,
            "entities": [{"label": e.label.value, "surface": e.surface} for e in self.entities],
        }
        if self.truth_spans is not None:
            obj["truth_spans"] = [list(s) for s in self.truth_spans]
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_obj(cls, obj: dict) -> "Document":
        spans = obj.get("truth_spans")
        return cls(
            id=str(obj["id"]),
            source_tokens=list(obj["source_tokens"]),
            entities=[Entity(EntityLabel(e["label"]), e["surface"]) for e in obj["entities"]],
            truth_spans=[tuple(s) for s in spans] if spans is not None else None,
        )

    def surfaces(self, labels: Iterable[EntityLabel] = PARTY_LABELS) -> list[Entity]:
        labels = set(labels)
        return [e for e in self.entities if e.label in labels]


@dataclass(frozen=True)
class NoiseConfig:
    char_sub_prob: float = 0.0
    interleave_prob: float = 0.0
    variant_prob: float = 0.0
    length_percentiles: tuple[int, int, int] = (80, 300, 1600)
    duplicate_mention_prob: float = 0.3
    rng_seed: int = 0
    max_tokens: int | None = None
    case_number_prob: float = 1.0

    def validate(self) -> None:
        for name in ("char_sub_prob", "interleave_prob", "variant_prob", "duplicate_mention_prob",
                     "case_number_prob"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be a probability in [0, 1], got {v!r}")
        p = self.length_percentiles
        if len(p) != 3 or not all(int(x) >= 1 for x in p) or not p[0] <= p[1] <= p[2]:
            raise ConfigError(f"length_percentiles must satisfy 1 <= p5 <= p50 <= p95, got {p!r}")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")
        if not isinstance(self.rng_seed, int) or not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown noise config keys: {sorted(extra)}")
        d = dict(d)
        if "length_percentiles" in d:
            d["length_percentiles"] = tuple(int(x) for x in d["length_percentiles"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["length_percentiles"] = list(self.length_percentiles)
        return d


DESK_LENGTHS = (80, 300, 1600)
FULL_LENGTHS = (838, 2901, 16713)
FULL_SCALE = NoiseConfig(char_sub_prob=0.02, interleave_prob=0.5, variant_prob=0.05,
                         length_percentiles=FULL_LENGTHS)


# ------------------------------------------------------------------ inventories

# Multi-character confusions are tried first.
CONFUSIONS: dict[str, str] = {
    "rn": "m",
    "m": "rn",
    "l": "1",
    "1": "l",
    "O": "0",
    "0": "O",
    "S": "5",
    "s": "5",
    "5": "S",
    "e": "c",
    "c": "e",
}

FIRST_NAMES = (
    "james mary john patricia robert jennifer michael linda william elizabeth david barbara richard "
    "susan joseph jessica thomas sarah charles karen christopher nancy daniel lisa matthew betty "
    "anthony margaret mark sandra donald ashley steven kimberly paul emily andrew donna joshua "
    "michelle kenneth carol kevin amanda brian melissa george deborah timothy stephanie ronald "
    "rebecca edward sharon jason laura jeffrey cynthia ryan kathleen jacob amy gary angela nicholas "
    "shirley eric anna jonathan brenda stephen pamela larry emma justin nicole scott helen brandon "
    "samantha benjamin katherine samuel christine gregory debra alexander rachel frank carolyn "
    "raymond janet jack catherine dennis maria jerry heather tyler diane aaron ruth jose julie adam "
    "olivia henry joyce nathan virginia douglas victoria zachary kelly peter lauren kyle christina"
).split()

SURNAME_SYLLABLES = (
    "ab al an ar bel ber bro cal car cor dal dan del dor fal fen fer gal gar gor hal han har hol "
    "kal kan ker kin lam lan lar lin mal man mar mor nal nel nor pal par per pol quin ral ran rin "
    "ros sal san sel sor tal tam tan ter tor val van ver vor wal war wil yar zan zel"
).split()
SURNAME_ENDINGS = "son ton ley man berg ford field well wood ski ez ard ing ett ick by er ow".split()

COMPANY_WORDS = (
    "acme global united american national pacific atlantic summit river valley mountain harbor "
    "pioneer liberty eagle star northern southern eastern western central premier capital first "
    "security standard general allied consolidated integrated advanced dynamic strategic metro "
    "coastal continental heritage keystone landmark meridian pinnacle sterling titan vanguard "
    "apex crown diamond emerald granite horizon legacy monarch oak phoenix prairie redwood sierra "
    "silver stone sunrise trinity union victory willow"
).split()
COMPANY_SUFFIXES = (
    ("Inc.",), ("Corp.",), ("LLC",), ("Corporation",), ("Company",), ("Holdings,", "Inc."),
    ("Group,", "LLC"), ("Bank,", "N.A."), ("Partners,", "L.P."), ("Insurance", "Company"),
    ("Services,", "Inc."), ("Logistics", "LLC"),
)

COURT_DISTRICTS = ("southern", "northern", "eastern", "western", "middle", "central")
STATES = (
    "new york", "california", "texas", "florida", "illinois", "ohio", "georgia", "michigan",
    "virginia", "pennsylvania", "new jersey", "washington", "arizona", "colorado", "alabama",
)

BODY_SEED_WORDS = (
    "the of and to in a that is for on by with as be this or any at from such which are all not "
    "has have was its been court action claim claims law federal state defendant defendants "
    "plaintiff plaintiffs under damages relief section jurisdiction venue complaint alleges upon "
    "information belief pursuant violation act rights other including has against party parties "
    "contract agreement breach payment notice time period employment business services products "
    "conduct harm injury costs fees attorney interest judgment order trial jury demand filed "
    "count first second third fourth further herein thereof therein thereto said same each "
    "unlawful practices alleged respect purposes whether because within without between during "
    "after before about their them they his her he she it we our you your company corporation "
    "individual resident citizen county district united states usc code statute regulation"
).split()

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_TEMPLATE_LETTERS = "abdfghjknpqrtuvwxyz"  # avoid letters the confusion table can produce

CASE_NUMBER_TEMPLATES = (
    "d:ddcvddddd",
    "ddddddd/dddd",
    "d:ddcrddddd",
    "dd-cv-ddddd",
    "ddd-dddd-dd",
    "d:dd-cv-dddd",
    "dd/dddddd",
    "Xd-dddd-ddd",
)


def _make_body_inventory(size: int = 6000) -> tuple[list[str], np.ndarray]:
    rng = np.random.default_rng(20240117)
    words = list(dict.fromkeys(BODY_SEED_WORDS))
    seen = set(words)
    consonants = "bcdfghklmnprstvw"
    vowels = "aeiou"
    while len(words) < size:
        n = int(rng.integers(2, 4))
        w = "".join(consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
                    for _ in range(n))
        if rng.random() < 0.5:
            w += consonants[rng.integers(len(consonants))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = ranks ** -1.05
    return words, np.cumsum(probs / probs.sum())


BODY_WORDS, _BODY_CDF = _make_body_inventory()

RIGHT_FILLERS = (("14",), ("document",), ("page", "1"), ("filed",), ("hon.",), ("ecf",), ("2",))


# ------------------------------------------------------------------ primitives


def apply_char_noise(token: str, char_sub_prob: float, rng: np.random.Generator) -> str:
    """Replace confusable characters independently with probability ``char_sub_prob``.

    One uniform draw is consumed per confusable unit whatever the probability,
    so corruption is nested across probability levels for a fixed stream.
    """
    if not token:
        raise ValueError("apply_char_noise: empty token")
    out = []
    i = 0
    n = len(token)
    while i < n:
        pair = token[i:i + 2]
        if pair in CONFUSIONS:
            hit = rng.random() < char_sub_prob
            out.append(CONFUSIONS[pair] if hit else pair)
            i += 2
            continue
        ch = token[i]
        if ch in CONFUSIONS:
            hit = rng.random() < char_sub_prob
            out.append(CONFUSIONS[ch] if hit else ch)
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def interleave_columns(header_lines_left: Sequence[Sequence[str]],
                       header_lines_right: Sequence[Sequence[str]]) -> list[str]:
    """Read a two-column block the way OCR does: row by row, left then right."""
    if not header_lines_left or not header_lines_right:
        raise ValueError("interleave_columns: both columns need at least one row")
    out: list[str] = []
    rows = max(len(header_lines_left), len(header_lines_right))
    for r in range(rows):
        if r < len(header_lines_left):
            out.extend(header_lines_left[r])
        if r < len(header_lines_right):
            out.extend(header_lines_right[r])
    return out


def make_name_variant(surface: str, rng: np.random.Generator) -> str:
    """Shorten a name: middle -> initial, drop the middle, or first -> initial."""
    parts = surface.split()
    if len(parts) < 2:
        return surface
    choices = ["first_initial"]
    if len(parts) >= 3:
        choices = ["middle_initial", "drop_middle", "first_initial"]
    kind = choices[int(rng.integers(len(choices)))]
    return _variant(parts, kind)


def _variant(parts: list[str], kind: str) -> str:
    if kind == "middle_initial":
        return " ".join([parts[0], parts[1][0] + "."] + parts[2:])
    if kind == "drop_middle":
        return " ".join([parts[0]] + parts[2:])
    return " ".join([parts[0][0] + "."] + parts[1:])


def generate_case_number(rng: np.random.Generator) -> str:
    template = CASE_NUMBER_TEMPLATES[int(rng.integers(len(CASE_NUMBER_TEMPLATES)))]
    return fill_case_template(template, rng)


def fill_case_template(template: str, rng: np.random.Generator) -> str:
    out = []
    for ch in template:
        if ch == "d":
            out.append(str(int(rng.integers(10))))
        elif ch == "X":
            out.append(_TEMPLATE_LETTERS[int(rng.integers(len(_TEMPLATE_LETTERS)))])
        else:
            out.append(ch)
    return "".join(out)


# ------------------------------------------------------------------- documents


def _surname(rng) -> str:
    n = 1 + int(rng.random() < 0.45)
    core = "".join(SURNAME_SYLLABLES[int(rng.integers(len(SURNAME_SYLLABLES)))] for _ in range(n))
    return core + SURNAME_ENDINGS[int(rng.integers(len(SURNAME_ENDINGS)))]


def _person(rng) -> str:
    first = FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))]
    parts = [first]
    if rng.random() < 0.35:
        parts.append(FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))])
    parts.append(_surname(rng))
    return " ".join(p.capitalize() for p in parts)


def _company(rng) -> str:
    words = []
    if rng.random() < 0.4:
        words.append(_surname(rng).capitalize())
    else:
        words.append(COMPANY_WORDS[int(rng.integers(len(COMPANY_WORDS)))].capitalize())
    if rng.random() < 0.5:
        words.append(COMPANY_WORDS[int(rng.integers(len(COMPANY_WORDS)))].capitalize())
    suffix = COMPANY_SUFFIXES[int(rng.integers(len(COMPANY_SUFFIXES)))]
    return " ".join(words + list(suffix))


def _party_name(rng) -> tuple[str, bool]:
    if rng.random() < 0.6:
        return _person(rng), True
    return _company(rng), False


def tokenize_text(text: str) -> list[str]:
    from .textproc import tokenize_words

    return tokenize_words(text)


def _body_word(rng) -> str:
    return BODY_WORDS[int(np.searchsorted(_BODY_CDF, rng.random()))]


def _sample_length(rng, pct: tuple[int, int, int]) -> int:
    p5, p50, p95 = pct
    z = rng.standard_normal()
    lo = (math.log(p50) - math.log(p5)) / 1.6448536
    hi = (math.log(p95) - math.log(p50)) / 1.6448536
    return max(1, int(round(math.exp(math.log(p50) + z * (lo if z < 0 else hi)))))


def _sentence(rng, n_words: int) -> list[str]:
    words = [_body_word(rng) for _ in range(n_words)]
    words[0] = words[0].capitalize()
    return words + ["."]


class _Builder:
    """Accumulates tokens while remembering where each entity mention landed."""

    def __init__(self):
        self.tokens: list[str] = []
        self.spans: list[tuple[int, int, int]] = []

    def extend(self, toks):
        self.tokens.extend(toks)

    def mention(self, ent_idx: int, toks: list[str]):
        start = len(self.tokens)
        self.tokens.extend(toks)
        if toks:
            self.spans.append((ent_idx, start, len(self.tokens) - 1))


def _generate_one(config: NoiseConfig, index: int) -> Document:
    rng = np.random.default_rng([config.rng_seed, index, 0])
    noise = np.random.default_rng([config.rng_seed, index, 1])

    n_parties = min(8, 2 + int(rng.poisson(1.0)))
    n_plaintiffs = 1 + int(rng.binomial(n_parties - 2, 0.4))
    names: list[str] = []
    is_person: list[bool] = []
    while len(names) < n_parties:
        nm, person = _party_name(rng)
        if nm.casefold() not in {x.casefold() for x in names}:
            names.append(nm)
            is_person.append(person)
    entities = [Entity(EntityLabel.PLAINTIFF, nm) for nm in names[:n_plaintiffs]]
    entities += [Entity(EntityLabel.DEFENDANT, nm) for nm in names[n_plaintiffs:]]
    case_number = generate_case_number(rng) if rng.random() < config.case_number_prob else None
    if case_number is not None:
        entities.append(Entity(EntityLabel.CASENUMBER, case_number))

    # per-entity source forms; draws happen regardless of probabilities
    mention_forms: list[list[str]] = []
    for k, ent in enumerate(entities):
        form = ent.surface
        u_var = noise.random()
        kind_u = noise.random()
        if k < n_parties and is_person[k] and u_var < config.variant_prob:
            parts = form.split()
            kinds = ["middle_initial", "drop_middle", "first_initial"] if len(parts) >= 3 else ["first_initial"]
            form = _variant(parts, kinds[int(kind_u * len(kinds))])
        mention_forms.append(tokenize_text(form))

    b = _Builder()
    district = COURT_DISTRICTS[int(rng.integers(len(COURT_DISTRICTS)))]
    state = STATES[int(rng.integers(len(STATES)))]
    b.extend(["UNITED", "STATES", "DISTRICT", "COURT"])
    b.extend([w.upper() for w in f"{district} district of {state}".split()])

    # two-column caption
    left: list[list[str]] = []
    left_mentions: list[tuple[int, int, list[str]]] = []  # (row, entity, tokens)
    split_rows: list[int] = []
    right_queue: list[list[str]] = []
    if case_number is not None:
        right_queue.append(["Case", "No", "."])
        right_queue.append([case_number])
    right_queue += [["COMPLAINT"], ["JURY", "TRIAL", "DEMANDED"]]
    if rng.random() < 0.5:
        right_queue.append(["Judge", _surname(rng).capitalize()])

    def add_party(ent_idx: int, last: bool):
        toks = [t.upper() for t in mention_forms[ent_idx]]
        tail = [] if last else [","]
        u = noise.random()
        cut = 1 + int(noise.random() * max(len(toks) - 1, 1))
        if len(toks) >= 2 and u < config.interleave_prob:
            left.append(toks[:cut])
            split_rows.append(len(left) - 1)
            left_mentions.append((len(left) - 1, ent_idx, toks))
            left.append(toks[cut:] + tail)
        else:
            left_mentions.append((len(left), ent_idx, toks))
            left.append(toks + tail)

    p_idx = [i for i, e in enumerate(entities) if e.label is EntityLabel.PLAINTIFF]
    d_idx = [i for i, e in enumerate(entities) if e.label is EntityLabel.DEFENDANT]
    for k, i in enumerate(p_idx):
        add_party(i, k == len(p_idx) - 1)
    left.append([",", "Plaintiffs" if len(p_idx) > 1 else "Plaintiff", ","])
    left.append(["v", "."])
    for k, i in enumerate(d_idx):
        add_party(i, k == len(d_idx) - 1)
    left.append([",", "Defendants" if len(d_idx) > 1 else "Defendant", "."])

    right: list[list[str]] = [[] for _ in left]
    for r in split_rows:
        if right_queue:
            right[r] = right_queue.pop(0)
        else:
            right[r] = list(RIGHT_FILLERS[int(rng.integers(len(RIGHT_FILLERS)))])
    free = [r for r in range(len(left)) if r not in set(split_rows)
            and not any(m[0] == r for m in left_mentions)]
    for r in free:
        if not right_queue:
            break
        right[r] = right_queue.pop(0)
    while right_queue:
        left.append([])
        right.append(right_queue.pop(0))

    # place the caption while recording mention extents
    base = len(b.tokens)
    row_start = []
    pos = base
    for r in range(len(left)):
        row_start.append(pos)
        pos += len(left[r]) + len(right[r])
    b.extend(interleave_columns(left, right))
    for row, ent_idx, toks in left_mentions:
        start = row_start[row]
        if row in split_rows:
            end = row_start[row + 1] + len(toks) - len(left[row]) - 1
        else:
            end = start + len(toks) - 1
        b.spans.append((ent_idx, start, end))
    if case_number is not None:
        r = next(r for r in range(len(right)) if right[r] == [case_number])
        at = row_start[r] + len(left[r])
        b.spans.append((len(entities) - 1, at, at))

    # intro paragraph, then body
    target_len = _sample_length(rng, config.length_percentiles)
    if config.max_tokens is not None:
        target_len = min(target_len, config.max_tokens)
    dup_intro: list[int] = []
    dup_late: list[int] = []
    for i, e in enumerate(entities):
        if e.label is EntityLabel.CASENUMBER:
            continue
        if rng.random() < config.duplicate_mention_prob:
            (dup_intro if rng.random() < 0.8 else dup_late).append(i)
    if dup_intro:
        b.extend(["1", "."])
        for k, i in enumerate(dup_intro):
            word = "Plaintiff" if entities[i].label is EntityLabel.PLAINTIFF else "Defendant"
            b.extend([word])
            b.mention(i, list(mention_forms[i]))
            b.extend(_sentence(rng, int(rng.integers(4, 10)))[:-1])
            b.extend(["." if k == len(dup_intro) - 1 else ","])
    remaining = max(target_len - len(b.tokens), 0)
    body_chunks = []
    total = 0
    while total < remaining:
        n = int(rng.integers(6, 22))
        s = _sentence(rng, n)
        if total + len(s) > remaining:
            s = s[: max(remaining - total, 0)]
        if not s:
            break
        body_chunks.append(s)
        total += len(s)
    late_slots: dict[int, list[int]] = {}
    for i in dup_late:
        slot = int(rng.integers(len(body_chunks) + 1))
        late_slots.setdefault(slot, []).append(i)
    for k in range(len(body_chunks) + 1):
        for i in late_slots.get(k, ()):
            word = "Plaintiff" if entities[i].label is EntityLabel.PLAINTIFF else "Defendant"
            b.extend([word])
            b.mention(i, list(mention_forms[i]))
            b.extend([","])
        if k < len(body_chunks):
            b.extend(body_chunks[k])

    if config.max_tokens is not None and len(b.tokens) > config.max_tokens:
        # the caption is never cut
        keep = max(config.max_tokens, base + sum(len(l) + len(r) for l, r in zip(left, right)))
        b.tokens = b.tokens[:keep]
        b.spans = [s for s in b.spans if s[2] < keep]

    tokens = [apply_char_noise(t, config.char_sub_prob, noise) for t in b.tokens]
    spans = sorted(set(b.spans))
    doc = Document(id=f"s{config.rng_seed}-{index:06d}", source_tokens=tokens,
                   entities=entities, truth_spans=spans)
    doc.validate()
    return doc


def _generate_packed(args: tuple[NoiseConfig, int]) -> Document:
    return _generate_one(*args)


def generate_corpus(config: NoiseConfig, n_docs: int, threads: int = 1) -> list[Document]:
    """Generate ``n_docs`` documents; a pure function of ``(config, n_docs)``."""
    config.validate()
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    if threads > 1:
        from .parallel import parallel_map

        return parallel_map(_generate_packed, [(config, i) for i in range(n_docs)], threads)
    return [_generate_one(config, i) for i in range(n_docs)]


def iter_corpus(config: NoiseConfig, n_docs: int) -> Iterator[Document]:
    config.validate()
    for i in range(n_docs):
        yield _generate_one(config, i)


# ---------------------------------------------------------------------- JSONL


def write_jsonl(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(d.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                docs.append(Document.from_obj(json.loads(line)))
    return docs
