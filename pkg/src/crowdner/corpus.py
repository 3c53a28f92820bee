"""Multi-annotator BIO corpora: parsing, validation, splitting, synthesis.

A corpus file is UTF-8 TSV: one token per line, one column per crowd
annotator (`-` marks a sentence the annotator did not label), an optional
final expert column, and blank lines between sentences.  The tagset lives
in a sidecar file (same path + ".tags", one tag per line).
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

logger = logging.getLogger(__name__)

# Reserved annotator id for the expert; crowd ids are dense 0..M-1.
EXPERT = -1

MISSING = "-"


class CorpusError(ValueError):
    """Malformed corpus data (bad columns, undeclared tags, ...)."""


class EntitySpan(NamedTuple):
    start: int
    end: int  # exclusive
    label: str


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or any(t == "" for t in self.tokens):
            raise CorpusError(f"sentence {self.id}: tokens must be non-empty")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class CrowdCorpus:
    """Sentences plus per-sentence, per-annotator tag sequences.

    `annotations` maps sentence id -> annotator id -> tags.  `expert_labels`
    maps sentence id -> tags and may cover any subset of sentences.
    Instances are treated as immutable once built; ops return new corpora.
    """

    tagset: tuple[str, ...]
    sentences: tuple[Sentence, ...]
    num_annotators: int
    annotations: dict[str, dict[int, tuple[str, ...]]] = field(default_factory=dict)
    expert_labels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def entity_types(self) -> tuple[str, ...]:
        return entity_types_of(self.tagset)

    @property
    def annotators(self) -> range:
        return range(self.num_annotators)

    @property
    def num_annotations(self) -> int:
        return sum(len(v) for v in self.annotations.values())

    def sentence_by_id(self, sid: str) -> Sentence:
        if not hasattr(self, "_by_id"):
            self._by_id = {s.id: s for s in self.sentences}
        return self._by_id[sid]

    def has_expert_for_all(self) -> bool:
        return all(s.id in self.expert_labels for s in self.sentences)


def entity_types_of(tagset: Sequence[str]) -> tuple[str, ...]:
    seen: list[str] = []
    for tag in tagset:
        if tag != "O":
            t = tag.split("-", 1)[1]
            if t not in seen:
                seen.append(t)
    return tuple(seen)


def make_tagset(entity_types: Sequence[str]) -> tuple[str, ...]:
    """Canonical tagset order: O first, then B-T, I-T per sorted type."""
    tags = ["O"]
    for t in sorted(entity_types):
        tags.extend([f"B-{t}", f"I-{t}"])
    return tuple(tags)


def _split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "I"):
        return tag[0], tag[2:]
    raise CorpusError(f"tag {tag!r} is not O, B-<type>, or I-<type>")


def repair_bio(
    tags: Sequence[str], entity_types: Iterable[str] | None = None
) -> tuple[str, ...]:
    """Return structurally valid BIO: an orphan I-T (no preceding B-T/I-T of
    the same type) becomes B-T; everything else is unchanged."""
    allowed = set(entity_types) if entity_types is not None else None
    out: list[str] = []
    prev_type: str | None = None
    for tag in tags:
        prefix, etype = _split_tag(tag)
        if etype is not None and allowed is not None and etype not in allowed:
            raise CorpusError(f"unknown entity type {etype!r} in tag {tag!r}")
        if prefix == "I" and etype != prev_type:
            out.append(f"B-{etype}")
        else:
            out.append(tag)
        prev_type = etype
    return tuple(out)


def extract_spans(tags: Sequence[str]) -> set[EntitySpan]:
    """Maximal (start, end-exclusive, type) spans of a valid BIO sequence.

    Raises on structurally invalid input; run repair_bio first.
    """
    spans: set[EntitySpan] = set()
    start: int | None = None
    cur: str | None = None
    for i, tag in enumerate(tags):
        prefix, etype = _split_tag(tag)
        if prefix == "I":
            if cur is None or etype != cur:
                raise CorpusError(f"invalid BIO at position {i}: {tag!r} has no open span")
            continue
        if cur is not None:
            spans.add(EntitySpan(start, i, cur))
        start, cur = (i, etype) if prefix == "B" else (None, None)
    if cur is not None:
        spans.add(EntitySpan(start, len(tags), cur))
    return spans


def tags_from_spans(spans: Iterable[EntitySpan], length: int) -> tuple[str, ...]:
    """Inverse of extract_spans for non-overlapping spans."""
    tags = ["O"] * length
    for span in sorted(spans):
        if not (0 <= span.start < span.end <= length):
            raise CorpusError(f"span {span} out of bounds for length {length}")
        if any(tags[i] != "O" for i in range(span.start, span.end)):
            raise CorpusError(f"span {span} overlaps a previous span")
        tags[span.start] = f"B-{span.label}"
        for i in range(span.start + 1, span.end):
            tags[i] = f"I-{span.label}"
    return tuple(tags)


# ---------------------------------------------------------------------------
# File format


def read_tagset(path: str) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as f:
        tags = tuple(line.strip() for line in f if line.strip())
    if "O" not in tags:
        raise CorpusError(f"tagset file {path} does not declare the O tag")
    return tags


def write_tagset(tagset: Sequence[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tag in tagset:
            f.write(tag + "\n")


def parse_corpus(
    path: str,
    tagset: Sequence[str],
    num_annotators: int | None = None,
    has_expert: bool = False,
) -> CrowdCorpus:
    """Parse the TSV layout into a corpus.

    When `num_annotators` is None it is inferred from the first data line.
    A sentence/annotator cell pattern must be all `-` (unlabeled) or all
    tags; anything mixed is an error.  Invalid BIO sequences are repaired
    and the repair count is logged.
    """
    tagset = tuple(tagset)
    declared = set(tagset)
    entity_types = entity_types_of(tagset)

    blocks: list[list[tuple[int, list[str]]]] = []
    current: list[tuple[int, list[str]]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if current:
                    blocks.append(current)
                    current = []
                continue
            current.append((lineno, line.split("\t")))
    if current:
        blocks.append(current)
    if not blocks:
        raise CorpusError(f"{path}: no sentences")

    first_cols = len(blocks[0][0][1])
    if num_annotators is None:
        num_annotators = first_cols - 1 - (1 if has_expert else 0)
    expected = 1 + num_annotators + (1 if has_expert else 0)
    if num_annotators < 0 or first_cols != expected:
        raise CorpusError(
            f"{path}:{blocks[0][0][0]}: expected {expected} columns, got {first_cols}"
        )

    sentences: list[Sentence] = []
    annotations: dict[str, dict[int, tuple[str, ...]]] = {}
    expert_labels: dict[str, tuple[str, ...]] = {}
    repaired = 0

    def check_tag(cell: str, lineno: int) -> str:
        if cell != MISSING and cell not in declared:
            raise CorpusError(f"{path}:{lineno}: undeclared tag {cell!r}")
        return cell

    for index, block in enumerate(blocks):
        sid = f"s{index:05d}"
        tokens = []
        for lineno, parts in block:
            if len(parts) != expected:
                raise CorpusError(
                    f"{path}:{lineno}: expected {expected} columns, got {len(parts)}"
                )
            if parts[0] == "":
                raise CorpusError(f"{path}:{lineno}: empty token")
            tokens.append(parts[0])
        sentence = Sentence(sid, tuple(tokens))
        sentences.append(sentence)
        first_line = block[0][0]

        columns = list(zip(*(parts for _, parts in block)))
        sent_ann: dict[int, tuple[str, ...]] = {}
        for a in range(num_annotators):
            cells = [check_tag(c, ln) for (ln, _), c in zip(block, columns[1 + a])]
            missing = sum(c == MISSING for c in cells)
            if missing == len(cells):
                continue
            if missing:
                raise CorpusError(
                    f"{path}:{first_line}: annotator {a} labels sentence {sid} "
                    f"only partially"
                )
            fixed = repair_bio(cells, entity_types)
            if fixed != tuple(cells):
                repaired += 1
            sent_ann[a] = fixed
        if sent_ann:
            annotations[sid] = sent_ann

        if has_expert:
            cells = [check_tag(c, ln) for (ln, _), c in zip(block, columns[-1])]
            missing = sum(c == MISSING for c in cells)
            if missing not in (0, len(cells)):
                raise CorpusError(
                    f"{path}:{first_line}: expert labels sentence {sid} only partially"
                )
            if missing == 0:
                fixed = repair_bio(cells, entity_types)
                if fixed != tuple(cells):
                    repaired += 1
                expert_labels[sid] = fixed

    if repaired:
        logger.info("parse_corpus(%s): repaired %d label sequences", path, repaired)
    return CrowdCorpus(
        tagset=tagset,
        sentences=tuple(sentences),
        num_annotators=num_annotators,
        annotations=annotations,
        expert_labels=expert_labels,
    )


def write_corpus(corpus: CrowdCorpus, path: str) -> bool:
    """Write the TSV layout; the expert column is emitted iff any sentence
    carries expert labels.  Returns whether the expert column was written."""
    has_expert = bool(corpus.expert_labels)
    with open(path, "w", encoding="utf-8") as f:
        for si, sentence in enumerate(corpus.sentences):
            if si:
                f.write("\n")
            sent_ann = corpus.annotations.get(sentence.id, {})
            expert = corpus.expert_labels.get(sentence.id)
            for i, token in enumerate(sentence.tokens):
                cells = [token]
                for a in range(corpus.num_annotators):
                    tags = sent_ann.get(a)
                    cells.append(tags[i] if tags is not None else MISSING)
                if has_expert:
                    cells.append(expert[i] if expert is not None else MISSING)
                f.write("\t".join(cells) + "\n")
    return has_expert


def save_corpus(corpus: CrowdCorpus, path: str) -> bool:
    """write_corpus plus the tagset sidecar at `path + '.tags'`."""
    has_expert = write_corpus(corpus, path)
    write_tagset(corpus.tagset, path + ".tags")
    return has_expert


def load_corpus(
    path: str, num_annotators: int | None = None, has_expert: bool = False
) -> CrowdCorpus:
    """parse_corpus using the tagset sidecar at `path + '.tags'`."""
    return parse_corpus(path, read_tagset(path + ".tags"), num_annotators, has_expert)


# ---------------------------------------------------------------------------
# Splitting


def split_corpus(
    corpus: CrowdCorpus, fractions: Sequence[float], seed: int
) -> list[CrowdCorpus]:
    """Disjoint sentence-level partition.

    Part sizes are the nearest integers to fraction*n with the remainder
    assigned to part 0; the sentence assignment is a seeded shuffle.
    """
    if not corpus.sentences:
        raise CorpusError("cannot split an empty corpus")
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")

    n = len(corpus.sentences)
    sizes = [int(math.floor(f * n + 0.5)) for f in fractions]
    sizes[0] += n - sum(sizes)
    if sizes[0] < 0:
        raise ValueError("rounding left part 0 with negative size")

    order = list(range(n))
    random.Random(seed).shuffle(order)

    parts = []
    at = 0
    for size in sizes:
        picked = sorted(order[at : at + size])
        at += size
        sentences = tuple(corpus.sentences[i] for i in picked)
        ids = {s.id for s in sentences}
        parts.append(
            CrowdCorpus(
                tagset=corpus.tagset,
                sentences=sentences,
                num_annotators=corpus.num_annotators,
                annotations={k: dict(v) for k, v in corpus.annotations.items() if k in ids},
                expert_labels={k: v for k, v in corpus.expert_labels.items() if k in ids},
            )
        )
    return parts


# ---------------------------------------------------------------------------
# Synthetic crowd generation


@dataclass(frozen=True)
class AnnotatorProfile:
    """Noise profile used to derive one annotator's labels from expert labels.

    confusion[s][t] is the probability of relabeling an entity of type s as
    type t; each row must sum to 1.
    """

    miss_rate: float
    confusion: Mapping[str, Mapping[str, float]]
    spurious_rate: float
    boundary_jitter: float

    def __post_init__(self):
        for name in ("miss_rate", "boundary_jitter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0,1]")
        if self.spurious_rate < 0:
            raise ValueError("spurious_rate must be non-negative")
        for s, row in self.confusion.items():
            if any(p < 0 or p > 1 for p in row.values()):
                raise ValueError(f"confusion row {s} has probabilities outside [0,1]")
            total = sum(row.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"confusion row {s} sums to {total}, expected 1")

    @classmethod
    def clean(cls, entity_types: Sequence[str]) -> "AnnotatorProfile":
        confusion = {s: {t: 1.0 if s == t else 0.0 for t in entity_types} for s in entity_types}
        return cls(0.0, confusion, 0.0, 0.0)

    @classmethod
    def spammer(cls, entity_types: Sequence[str], miss_rate: float = 0.5) -> "AnnotatorProfile":
        uniform = 1.0 / len(entity_types)
        confusion = {s: {t: uniform for t in entity_types} for s in entity_types}
        return cls(miss_rate, confusion, 0.5, 0.3)

    def to_dict(self) -> dict:
        return {
            "miss_rate": self.miss_rate,
            "confusion": {s: dict(row) for s, row in self.confusion.items()},
            "spurious_rate": self.spurious_rate,
            "boundary_jitter": self.boundary_jitter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnnotatorProfile":
        return cls(
            miss_rate=d["miss_rate"],
            confusion=d["confusion"],
            spurious_rate=d["spurious_rate"],
            boundary_jitter=d["boundary_jitter"],
        )


def _sample_type(row: Mapping[str, float], types: Sequence[str], rng: random.Random) -> str:
    u = rng.random()
    acc = 0.0
    for t in types:
        acc += row.get(t, 0.0)
        if u < acc:
            return t
    return types[-1]


def _perturb(
    expert_tags: Sequence[str],
    profile: AnnotatorProfile,
    entity_types: Sequence[str],
    rng: random.Random,
) -> tuple[str, ...]:
    n = len(expert_tags)
    spans = sorted(extract_spans(expert_tags))

    kept: list[EntitySpan] = []
    for span in spans:
        if rng.random() < profile.miss_rate:
            continue  # miss: delete the gold entity
        label = _sample_type(profile.confusion[span.label], entity_types, rng)
        start, end = span.start, span.end
        if rng.random() < profile.boundary_jitter:
            side = rng.choice(("start", "end"))
            delta = rng.choice((-1, 1))
            if side == "start" and 0 <= start + delta < end:
                start += delta
            elif side == "end" and start < end + delta <= n:
                end += delta
        kept.append(EntitySpan(start, end, label))

    # Resolve overlaps introduced by jitter: first span wins.
    placed: list[EntitySpan] = []
    occupied = [False] * n
    for span in sorted(kept):
        if any(occupied[i] for i in range(span.start, span.end)):
            continue
        placed.append(span)
        for i in range(span.start, span.end):
            occupied[i] = True

    extra = int(profile.spurious_rate) + (1 if rng.random() < profile.spurious_rate % 1.0 else 0)
    for _ in range(extra):
        length = rng.randint(1, 2)
        if n < length:
            continue
        start = rng.randrange(0, n - length + 1)
        if any(occupied[i] for i in range(start, start + length)):
            continue
        label = rng.choice(list(entity_types))
        placed.append(EntitySpan(start, start + length, label))
        for i in range(start, start + length):
            occupied[i] = True

    return repair_bio(tags_from_spans(placed, n), entity_types)


def synth_generate(
    gold: CrowdCorpus,
    profiles: Sequence[AnnotatorProfile],
    coverage: float,
    seed: int,
) -> CrowdCorpus:
    """Derive a crowd corpus by perturbing expert labels per profile.

    Each annotator labels a seeded random `coverage` fraction of sentences;
    the perturbation order is miss, confuse, jitter, spurious.
    """
    if not profiles:
        raise ValueError("need at least one annotator profile")
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage={coverage} outside (0,1]")
    if not gold.has_expert_for_all():
        raise CorpusError("synth_generate requires expert labels for every sentence")

    rng = random.Random(seed)
    types = gold.entity_types
    n = len(gold.sentences)
    subset_size = max(1, int(math.floor(coverage * n + 0.5)))

    annotations: dict[str, dict[int, tuple[str, ...]]] = {}
    for a, profile in enumerate(profiles):
        for i in sorted(rng.sample(range(n), subset_size)):
            sentence = gold.sentences[i]
            tags = _perturb(gold.expert_labels[sentence.id], profile, types, rng)
            annotations.setdefault(sentence.id, {})[a] = tags

    return CrowdCorpus(
        tagset=gold.tagset,
        sentences=gold.sentences,
        num_annotators=len(profiles),
        annotations=annotations,
        expert_labels=dict(gold.expert_labels),
    )


# ---------------------------------------------------------------------------
# Seeded template grammar for desk-scale gold corpora.
#
# Surface diversity (filler word classes, large name pools, a share of
# type-ambiguous names resolved only by context) keeps the task below the
# memorization ceiling at a few hundred sentences, so label noise has a
# measurable cost.

_PEOPLE = [
    ("anna", "kim"), ("bob",), ("carla", "jones"), ("david", "okafor"),
    ("emma",), ("frank", "mills"), ("grace", "chen"), ("henry",),
    ("irene", "vargas"), ("jonas",), ("karen", "holt"), ("luis", "ortega"),
    ("mara",), ("nikolai", "petrov"), ("olive", "tran"), ("pavel",),
    ("quinn", "avery"), ("rosa", "lindt"), ("samir",), ("tessa", "brook"),
]
_PLACES = [
    ("paris",), ("oslo",), ("new", "york"), ("rio",), ("lake", "tahoe"),
    ("berlin",), ("cairo",), ("port", "louis"), ("quebec",), ("mumbai",),
    ("kyoto",), ("palo", "alto"), ("santiago",), ("tanger",), ("utrecht",),
    ("veria",),
]
_ORGS = [
    ("acme", "corp"), ("globex",), ("initech",), ("umbrella", "group"),
    ("stark", "labs"), ("wayne", "inc"), ("hooli",), ("vanta", "systems"),
    ("nexora",), ("quantix", "ltd"), ("redwood", "partners"), ("solvex",),
    ("tetra", "works"), ("zenith", "media"),
]
_AMBIGUOUS = [
    ("washington",), ("jordan",), ("chelsea",), ("victoria",), ("phoenix",),
    ("austin",), ("madison",), ("hudson",), ("sydney",), ("aurora",),
    ("dakota",), ("logan",),
]
_AMBIGUOUS_SHARE = 0.35

# filler classes give each template many surface realizations
_FILLERS = {
    "say": ("said", "argued", "claimed", "noted", "stated", "insisted"),
    "time": ("yesterday", "today", "overnight", "recently", "tuesday", "friday"),
    "move": ("plan", "deal", "merger", "budget", "proposal", "contract"),
    "verb-good": ("praised", "backed", "welcomed", "endorsed", "defended"),
    "verb-bad": ("criticized", "questioned", "opposed", "blocked", "rejected"),
    "group": ("committee", "council", "union", "ministry", "panel", "board"),
    "event": ("summit", "election", "strike", "storm", "festival", "audit"),
    "amount": ("sharply", "slightly", "again", "unexpectedly", "further"),
}

_TEMPLATES = [
    ("<PER>", "[say]", "the", "[move]", "will", "work", "."),
    ("<PER>", "joined", "the", "[group]", "[time]", "."),
    ("the", "[group]", "thanked", "<PER>", "for", "the", "[move]", "."),
    ("<PER>", "spoke", "about", "the", "[event]", "[time]", "."),
    ("the", "flight", "to", "<LOC>", "was", "delayed", "[time]", "."),
    ("it", "rained", "in", "<LOC>", "during", "the", "[event]", "."),
    ("the", "road", "to", "<LOC>", "reopened", "[time]", "."),
    ("crowds", "gathered", "across", "<LOC>", "before", "the", "[event]", "."),
    ("shares", "of", "<ORG>", "fell", "[amount]", "[time]", "."),
    ("<ORG>", "reported", "strong", "profits", "[time]", "."),
    ("the", "[group]", "sued", "<ORG>", "over", "the", "[move]", "."),
    ("<ORG>", "announced", "a", "new", "[move]", "[time]", "."),
    ("<PER>", "visited", "<LOC>", "[time]", "."),
    ("<ORG>", "hired", "<PER>", "in", "<LOC>", "[time]", "."),
    ("<PER>", "works", "for", "<ORG>", "in", "<LOC>", "."),
    ("<ORG>", "opened", "an", "office", "in", "<LOC>", "[time]", "."),
    ("<PER>", "traveled", "from", "<LOC>", "to", "<LOC>", "."),
    ("officials", "[say]", "<PER>", "will", "lead", "<ORG>", "."),
    ("<PER>", "[verb-good]", "the", "[move]", "by", "<ORG>", "."),
    ("<PER>", "[verb-bad]", "the", "[event]", "in", "<LOC>", "."),
    ("<ORG>", "[verb-good]", "the", "[group]", "[time]", "."),
    ("residents", "of", "<LOC>", "[verb-bad]", "the", "[move]", "."),
]

_POOLS = {"PER": _PEOPLE, "LOC": _PLACES, "ORG": _ORGS}


def template_corpus(num_sentences: int, seed: int) -> CrowdCorpus:
    """Expert-labeled gold corpus from a seeded template grammar with
    PER/LOC/ORG entities (no crowd annotations)."""
    rng = random.Random(seed)
    tagset = make_tagset(("PER", "LOC", "ORG"))
    sentences = []
    expert: dict[str, tuple[str, ...]] = {}
    for i in range(num_sentences):
        template = rng.choice(_TEMPLATES)
        tokens: list[str] = []
        tags: list[str] = []
        for slot in template:
            if slot.startswith("<"):
                etype = slot[1:-1]
                if rng.random() < _AMBIGUOUS_SHARE:
                    name = rng.choice(_AMBIGUOUS)
                else:
                    name = rng.choice(_POOLS[etype])
                tokens.extend(name)
                tags.append(f"B-{etype}")
                tags.extend([f"I-{etype}"] * (len(name) - 1))
            elif slot.startswith("["):
                tokens.append(rng.choice(_FILLERS[slot[1:-1]]))
                tags.append("O")
            else:
                tokens.append(slot)
                tags.append("O")
        sid = f"s{i:05d}"
        sentences.append(Sentence(sid, tuple(tokens)))
        expert[sid] = tuple(tags)
    return CrowdCorpus(
        tagset=tagset,
        sentences=tuple(sentences),
        num_annotators=0,
        annotations={},
        expert_labels=expert,
    )
