"""End-to-end synthetic benchmark: annotator-aware training vs baselines.

Builds a seeded template-grammar gold corpus, derives a sparse crowd corpus
from six annotator profiles (two near-clean, three with distinct systematic
confusions, one spammer), trains the requested settings over several seeds,
and reports median test F1 on clean held-out labels.
"""

from __future__ import annotations

import logging
import os
import statistics
import tempfile
from dataclasses import dataclass, field, replace

from .config import TrainConfig
from .corpus import AnnotatorProfile, CrowdCorpus, split_corpus, synth_generate, template_corpus
from .crowd import TrainingMode, filter_annotators
from .evaluation import evaluate
from .model import decode_corpus
from .training import train

logger = logging.getLogger(__name__)

DATA_SEED = 101
SYNTH_SEED = 77
RUN_SEEDS = (1, 2, 3, 4, 5)

BENCH_CONFIG = TrainConfig(epochs=15, seed=0)


def benchmark_profiles(entity_types=("LOC", "ORG", "PER")) -> list[AnnotatorProfile]:
    """Six profiles; the spammer is last and should rank lowest on quality."""
    def confusion(bias: dict[str, dict[str, float]] | None = None):
        rows = {}
        for s in entity_types:
            row = {t: 0.0 for t in entity_types}
            row[s] = 1.0
            if bias and s in bias:
                for t, p in bias[s].items():
                    row[s] -= p
                    row[t] += p
            rows[s] = row
        return rows

    uniform = {s: {t: 1.0 / len(entity_types) for t in entity_types} for s in entity_types}
    return [
        AnnotatorProfile(0.02, confusion(), 0.01, 0.02),
        AnnotatorProfile(0.04, confusion(), 0.02, 0.04),
        AnnotatorProfile(0.15, confusion({"PER": {"ORG": 0.40}}), 0.10, 0.15),
        AnnotatorProfile(0.20, confusion({"LOC": {"PER": 0.35}}), 0.12, 0.15),
        AnnotatorProfile(0.12, confusion({"ORG": {"LOC": 0.45}}), 0.10, 0.20),
        AnnotatorProfile(0.55, uniform, 1.20, 0.45),  # the spammer
    ]


@dataclass
class BenchmarkData:
    gold: CrowdCorpus
    train_corpus: CrowdCorpus  # crowd annotations + expert labels
    test_corpus: CrowdCorpus   # clean held-out expert labels


def make_benchmark_data(
    num_sentences: int = 640,
    coverage: float = 0.4,
    data_seed: int = DATA_SEED,
    synth_seed: int = SYNTH_SEED,
) -> BenchmarkData:
    gold = template_corpus(num_sentences, seed=data_seed)
    train_gold, test = split_corpus(gold, [0.84375, 0.15625], seed=data_seed + 1)
    crowd = synth_generate(train_gold, benchmark_profiles(gold.entity_types), coverage, synth_seed)
    return BenchmarkData(gold=gold, train_corpus=crowd, test_corpus=test)


def test_f1(model, test_corpus: CrowdCorpus, expert: str) -> float:
    preds = decode_corpus(model, test_corpus, expert=expert)
    report = evaluate(
        [preds[s.id] for s in test_corpus.sentences],
        [test_corpus.expert_labels[s.id] for s in test_corpus.sentences],
    )
    return report.f1


def run_setting(
    corpus: CrowdCorpus,
    test_corpus: CrowdCorpus,
    mode: TrainingMode | str,
    config: TrainConfig,
    seeds=RUN_SEEDS,
    expert_fraction: float | None = None,
    work_dir: str | None = None,
) -> list[float]:
    """Train one setting once per seed; returns per-seed test F1."""
    mode = TrainingMode(mode)
    expert = "learned" if mode is TrainingMode.ANNOTATOR_AWARE_SUP else "centroid"
    scores = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        if work_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                result = train(corpus, mode, cfg, tmp, expert_fraction=expert_fraction)
                scores.append(test_f1(result.model, test_corpus, expert))
        else:
            out = os.path.join(work_dir, f"{mode.value}_seed{seed}")
            result = train(corpus, mode, cfg, out, expert_fraction=expert_fraction)
            scores.append(test_f1(result.model, test_corpus, expert))
        logger.info("%s seed=%d test F1 %.2f", mode.value, seed, scores[-1])
    return scores


@dataclass
class BenchmarkResult:
    scores: dict[str, list[float]] = field(default_factory=dict)

    def median(self, setting: str) -> float:
        return statistics.median(self.scores[setting])

    def table(self) -> str:
        lines = [f"{'setting':<18} {'median F1':>9}  per-seed"]
        for name, values in self.scores.items():
            per_seed = " ".join(f"{v:5.2f}" for v in values)
            lines.append(f"{name:<18} {statistics.median(values):9.2f}  {per_seed}")
        return "\n".join(lines) + "\n"


def run_benchmark(
    data: BenchmarkData | None = None,
    config: TrainConfig = BENCH_CONFIG,
    seeds=RUN_SEEDS,
    settings=("annotator-unsup", "all", "annotator-sup", "filtered-unsup", "filtered-all"),
    expert_fraction: float = 0.25,
    work_dir: str | None = None,
) -> BenchmarkResult:
    """Run the requested settings and collect per-seed test F1 scores.

    `filtered-*` settings drop the lowest-quality annotator (the spammer)
    via filter_annotators(k=1) before training.
    """
    data = data or make_benchmark_data()
    result = BenchmarkResult()
    filtered = None
    aliases = {"unsup": "annotator-unsup", "sup": "annotator-sup"}
    for setting in settings:
        if setting.startswith("filtered-"):
            if filtered is None:
                filtered = filter_annotators(data.train_corpus, 1).corpus
            corpus, mode = filtered, setting.removeprefix("filtered-")
        else:
            corpus, mode = data.train_corpus, setting
        mode = aliases.get(mode, mode)
        fraction = expert_fraction if mode == "annotator-sup" else None
        result.scores[setting] = run_setting(
            corpus, data.test_corpus, mode, config, seeds,
            expert_fraction=fraction, work_dir=work_dir,
        )
    return result
