#!/usr/bin/env python3
"""Run the synthetic crowd benchmark and print median test F1 per setting.

Settings: annotator-aware unsupervised, the ALL baseline, annotator-aware
supervised (expert labels on the most informative 25%), and both retrained
after dropping the lowest-quality annotator.

Usage:
    python scripts/synthetic_benchmark.py [--seeds 1 2 3 4 5] [--epochs 15]
        [--out-dir runs/benchmark]
"""

import argparse
import logging
import time
from dataclasses import replace

from crowdner.crowd import annotator_quality
from crowdner.evaluation import paired_t_test
from crowdner.experiments import (
    BENCH_CONFIG,
    make_benchmark_data,
    run_benchmark,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--epochs", type=int, default=BENCH_CONFIG.epochs)
    parser.add_argument("--sentences", type=int, default=640)
    parser.add_argument("--coverage", type=float, default=0.4)
    parser.add_argument("--expert-fraction", type=float, default=0.25)
    parser.add_argument("--out-dir", default=None,
                        help="keep checkpoints here (default: temp dirs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    started = time.time()

    data = make_benchmark_data(num_sentences=args.sentences, coverage=args.coverage)
    print(
        f"data: {len(data.train_corpus.sentences)} train sentences, "
        f"{data.train_corpus.num_annotations} crowd annotations, "
        f"{len(data.test_corpus.sentences)} clean test sentences"
    )
    quality = annotator_quality(data.train_corpus)
    print("annotator quality (F1 vs expert):",
          "  ".join(f"a{a}={f:.1f}" for a, f in sorted(quality.items())))

    config = replace(BENCH_CONFIG, epochs=args.epochs)
    result = run_benchmark(
        data,
        config=config,
        seeds=tuple(args.seeds),
        expert_fraction=args.expert_fraction,
        work_dir=args.out_dir,
    )
    print()
    print(result.table())

    unsup, all_ = result.scores["annotator-unsup"], result.scores["all"]
    print(f"annotator-aware vs ALL median gap: "
          f"{result.median('annotator-unsup') - result.median('all'):+.2f} F1 "
          f"(paired t-test p = {paired_t_test(unsup, all_):.4g})")
    print(f"supervised boost over unsupervised: "
          f"{result.median('annotator-sup') - result.median('annotator-unsup'):+.2f} F1")
    print(f"spammer filtering: annotator-aware "
          f"{result.median('filtered-unsup') - result.median('annotator-unsup'):+.2f}, "
          f"ALL {result.median('filtered-all') - result.median('all'):+.2f}")
    print(f"total time {time.time() - started:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
