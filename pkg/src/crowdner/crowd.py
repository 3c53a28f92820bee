"""Crowdsourcing logic: per-mode training instances, voting, expert
inference, annotator filtering, and informative-sentence selection."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from torch import Tensor

from .corpus import EXPERT, CrowdCorpus, CorpusError, extract_spans, repair_bio
from .evaluation import evaluate

logger = logging.getLogger(__name__)

# shared id for the annotator-agnostic baselines (1-row embedding table)
DUMMY_ANNOTATOR = 0


class TrainingMode(str, Enum):
    ALL = "all"
    MV = "mv"
    GOLD = "gold"
    ANNOTATOR_AWARE_UNSUP = "annotator-unsup"
    ANNOTATOR_AWARE_SUP = "annotator-sup"

    @property
    def annotator_aware(self) -> bool:
        return self in (TrainingMode.ANNOTATOR_AWARE_UNSUP, TrainingMode.ANNOTATOR_AWARE_SUP)


@dataclass(frozen=True)
class TrainInstance:
    sentence_id: str
    tokens: tuple[str, ...]
    annotator: int
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise CorpusError(
                f"instance {self.sentence_id}: {len(self.tokens)} tokens vs "
                f"{len(self.tags)} tags"
            )


def majority_vote(
    sequences: Sequence[Sequence[str]], entity_types: Sequence[str] | None = None
) -> tuple[str, ...]:
    """Per-token plurality vote; ties prefer O, then the lexicographically
    smallest tag.  The result is BIO-repaired."""
    if not sequences:
        raise ValueError("majority_vote needs at least one label sequence")
    n = len(sequences[0])
    if any(len(s) != n for s in sequences):
        raise ValueError("label sequences have differing lengths")
    voted = []
    for i in range(n):
        counts = Counter(s[i] for s in sequences)
        top = max(counts.values())
        winners = [t for t, c in counts.items() if c == top]
        voted.append("O" if "O" in winners else min(winners))
    return repair_bio(voted, entity_types)


def build_instances(
    corpus: CrowdCorpus,
    mode: TrainingMode,
    expert_fraction: float | None = None,
) -> list[TrainInstance]:
    """Construct the training set for a mode.

    ALL flattens every (sentence, annotator) pair onto one dummy id; MV
    votes per sentence (substituting expert labels on the selected fraction
    when given); GOLD uses expert labels only; the annotator-aware modes
    keep true ids, the supervised one adding EXPERT instances for the
    selected fraction of expert-labeled sentences.
    """
    mode = TrainingMode(mode)
    instances: list[TrainInstance] = []
    types = corpus.entity_types

    def crowd_pairs():
        for s in corpus.sentences:
            for a, tags in sorted(corpus.annotations.get(s.id, {}).items()):
                yield s, a, tags

    if mode is TrainingMode.ALL:
        for s, _, tags in crowd_pairs():
            instances.append(TrainInstance(s.id, s.tokens, DUMMY_ANNOTATOR, tags))

    elif mode is TrainingMode.MV:
        substitute: set[str] = set()
        if expert_fraction:
            substitute = set(select_informative(corpus, expert_fraction))
        single = 0
        for s in corpus.sentences:
            sent_ann = corpus.annotations.get(s.id, {})
            if s.id in substitute and s.id in corpus.expert_labels:
                tags = corpus.expert_labels[s.id]
            elif sent_ann:
                if len(sent_ann) == 1:
                    single += 1  # single annotation stands as the vote
                tags = majority_vote([sent_ann[a] for a in sorted(sent_ann)], types)
            else:
                continue
            instances.append(TrainInstance(s.id, s.tokens, DUMMY_ANNOTATOR, tags))
        if single:
            logger.info("majority vote: %d sentences had a single annotation", single)

    elif mode is TrainingMode.GOLD:
        if not corpus.expert_labels:
            raise CorpusError("GOLD mode requires expert labels")
        for s in corpus.sentences:
            if s.id in corpus.expert_labels:
                instances.append(
                    TrainInstance(s.id, s.tokens, DUMMY_ANNOTATOR, corpus.expert_labels[s.id])
                )

    elif mode is TrainingMode.ANNOTATOR_AWARE_UNSUP:
        for s, a, tags in crowd_pairs():
            instances.append(TrainInstance(s.id, s.tokens, a, tags))

    elif mode is TrainingMode.ANNOTATOR_AWARE_SUP:
        if not expert_fraction or not 0.0 < expert_fraction <= 1.0:
            raise ValueError("supervised mode needs expert_fraction in (0,1]")
        if not corpus.expert_labels:
            raise CorpusError("supervised mode requires expert labels")
        for s, a, tags in crowd_pairs():
            instances.append(TrainInstance(s.id, s.tokens, a, tags))
        for sid in select_informative(corpus, expert_fraction):
            s = corpus.sentence_by_id(sid)
            instances.append(TrainInstance(sid, s.tokens, EXPERT, corpus.expert_labels[sid]))

    if not instances:
        raise CorpusError(f"mode {mode.value}: corpus yields no training instances")
    return instances


def expert_centroid(table: Tensor) -> Tensor:
    """Mean of the crowd annotator embedding rows."""
    if table.dim() != 2 or table.shape[0] < 1:
        raise ValueError("need a non-empty (M, d) embedding table")
    return table.mean(dim=0)


def annotator_quality(corpus: CrowdCorpus) -> dict[int, float]:
    """Entity-level F1 of each annotator against the expert labels over the
    sentences that annotator labeled; unannotated annotators are skipped."""
    preds: dict[int, list] = {a: [] for a in corpus.annotators}
    golds: dict[int, list] = {a: [] for a in corpus.annotators}
    for s in corpus.sentences:
        for a, tags in corpus.annotations.get(s.id, {}).items():
            if s.id not in corpus.expert_labels:
                raise CorpusError(
                    f"sentence {s.id} is annotated but has no expert labels"
                )
            preds[a].append(tags)
            golds[a].append(corpus.expert_labels[s.id])
    scores: dict[int, float] = {}
    for a in corpus.annotators:
        if not preds[a]:
            logger.warning("annotator %d has no annotations; excluded from quality", a)
            continue
        scores[a] = evaluate(preds[a], golds[a]).f1
    return scores


@dataclass
class FilterResult:
    corpus: CrowdCorpus
    removed: tuple[int, ...]
    id_mapping: dict[int, int]  # old id -> new dense id
    report: str


def filter_annotators(corpus: CrowdCorpus, k: int) -> FilterResult:
    """Drop the k lowest-F1 annotators (and sentences left unannotated),
    re-densifying the surviving ids."""
    m = corpus.num_annotators
    if not 0 <= k < m:
        raise ValueError(f"k={k} outside [0, {m})")
    quality = annotator_quality(corpus)
    ranked = sorted(corpus.annotators, key=lambda a: (quality.get(a, -1.0), a))
    removed = tuple(sorted(ranked[:k]))
    kept = [a for a in corpus.annotators if a not in removed]
    mapping = {old: new for new, old in enumerate(kept)}

    annotations: dict[str, dict[int, tuple[str, ...]]] = {}
    sentences = []
    for s in corpus.sentences:
        remapped = {
            mapping[a]: tags
            for a, tags in corpus.annotations.get(s.id, {}).items()
            if a in mapping
        }
        if not remapped:
            continue
        sentences.append(s)
        annotations[s.id] = remapped
    ids = {s.id for s in sentences}

    lines = [f"filter_annotators: removed {k} of {m} annotators"]
    for a in removed:
        shown = f"{quality[a]:.2f}" if a in quality else "n/a"
        lines.append(f"  removed annotator {a} (F1 {shown})")
    for old in kept:
        if mapping[old] != old:
            lines.append(f"  annotator {old} -> {mapping[old]}")
    dropped = len(corpus.sentences) - len(sentences)
    lines.append(f"  dropped {dropped} sentences left with no annotations")

    filtered = CrowdCorpus(
        tagset=corpus.tagset,
        sentences=tuple(sentences),
        num_annotators=m - k,
        annotations=annotations,
        expert_labels={sid: t for sid, t in corpus.expert_labels.items() if sid in ids},
    )
    return FilterResult(filtered, removed, mapping, "\n".join(lines) + "\n")


def select_informative(corpus: CrowdCorpus, fraction: float) -> list[str]:
    """Sentence ids ranked by expert entity count (desc), then sentence
    length (desc), then id; the top round(fraction * n) are returned."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction={fraction} outside (0,1]")
    if not corpus.expert_labels:
        raise CorpusError("select_informative requires expert labels")

    def key(s):
        count = len(extract_spans(corpus.expert_labels[s.id]))
        return (-count, -len(s.tokens), s.id)

    eligible = [s for s in corpus.sentences if s.id in corpus.expert_labels]
    ranked = sorted(eligible, key=key)
    n = len(ranked)
    take = min(n, max(1, int(n * fraction + 0.5)))
    return [s.id for s in ranked[:take]]


def selection_report(corpus: CrowdCorpus, selected: Sequence[str]) -> str:
    lines = [f"select_informative: {len(selected)} of {len(corpus.sentences)} sentences"]
    for sid in selected:
        count = len(extract_spans(corpus.expert_labels[sid]))
        lines.append(f"  {sid}  entities={count}  length={len(corpus.sentence_by_id(sid))}")
    return "\n".join(lines) + "\n"
