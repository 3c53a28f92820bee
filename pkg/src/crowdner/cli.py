"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes a run manifest (config hash, seed, input checksums)
next to its output.  AA_LOG sets log verbosity (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from .config import TrainConfig
from .corpus import (
    AnnotatorProfile,
    CorpusError,
    CrowdCorpus,
    load_corpus,
    save_corpus,
    synth_generate,
)
from .crowd import (
    DUMMY_ANNOTATOR,
    TrainingMode,
    build_instances,
    filter_annotators,
    majority_vote,
    select_informative,
    selection_report,
)
from .evaluation import evaluate, export_embeddings
from .model import decode_corpus
from .training import (
    CheckpointError,
    NumericalError,
    gradient_check,
    load_checkpoint,
    train,
)

logger = logging.getLogger("crowdner")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def read_config_file(path: str) -> dict:
    """Flat key=value file; unknown keys are rejected."""
    known = set(TrainConfig.field_names())
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def _coerce(name: str, raw: str):
    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    hint = hints[name]
    if raw.lower() in ("none", ""):
        return None
    if hint in ("int", int):
        return int(raw)
    if hint in ("float", float):
        return float(raw)
    if hint == "int | None":
        return int(raw)
    return raw


def effective_config(args) -> TrainConfig:
    """Precedence: flags > config file > defaults."""
    values: dict = {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            values[key] = _coerce(key, raw)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: str, args, config: TrainConfig | None, inputs: list[str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg = dataclasses.asdict(config) if config is not None else None
    manifest = {
        "argv": sys.argv[1:],
        "command": args.command,
        "config": cfg,
        "config_sha256": hashlib.sha256(
            json.dumps(cfg, sort_keys=True).encode()
        ).hexdigest(),
        "seed": getattr(args, "seed", None),
        "inputs": {p: _sha256_file(p) for p in inputs if p and os.path.isfile(p)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _read_corpus(args, path: str | None = None) -> CrowdCorpus:
    path = path or args.corpus
    return load_corpus(
        path,
        num_annotators=getattr(args, "num_annotators", None),
        has_expert=getattr(args, "expert_column", False),
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    config = effective_config(args)
    logger.info("effective config: %s", dataclasses.asdict(config))
    corpus = _read_corpus(args)
    dev = _read_corpus(args, args.dev) if args.dev else None
    write_run_manifest(args.out, args, config, [args.corpus, args.dev or ""])
    result = train(
        corpus,
        TrainingMode(args.mode),
        config,
        args.out,
        dev_corpus=dev,
        expert_fraction=args.expert_fraction,
    )
    print(f"final checkpoint: {result.final_dir}")
    print(f"metrics: {os.path.join(result.out_dir, 'metrics.csv')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = _read_corpus(args)
    if not corpus.expert_labels:
        raise CorpusError("evaluation corpus has no expert labels")
    write_run_manifest(args.out or ".", args, model.config, [args.corpus])
    preds = decode_corpus(model, corpus, expert=args.inference_expert)
    eligible = [s for s in corpus.sentences if s.id in corpus.expert_labels]
    report = evaluate(
        [preds[s.id] for s in eligible],
        [corpus.expert_labels[s.id] for s in eligible],
    )
    text = report.render_text()
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "score_report.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        with open(os.path.join(args.out, "score_report.csv"), "w", encoding="utf-8") as f:
            f.write(report.render_csv())
    return EXIT_OK


def cmd_aggregate(args) -> int:
    corpus = _read_corpus(args)
    voted: dict[str, dict[int, tuple[str, ...]]] = {}
    for s in corpus.sentences:
        sent_ann = corpus.annotations.get(s.id)
        if not sent_ann:
            continue
        tags = majority_vote([sent_ann[a] for a in sorted(sent_ann)], corpus.entity_types)
        voted[s.id] = {DUMMY_ANNOTATOR: tags}
    aggregated = CrowdCorpus(
        tagset=corpus.tagset,
        sentences=tuple(s for s in corpus.sentences if s.id in voted),
        num_annotators=1,
        annotations=voted,
        expert_labels={
            sid: t for sid, t in corpus.expert_labels.items() if sid in voted
        },
    )
    has_expert = save_corpus(aggregated, args.out)
    write_run_manifest(os.path.dirname(args.out) or ".", args, None, [args.corpus])
    print(f"wrote {len(aggregated.sentences)} sentences to {args.out} "
          f"(expert column: {'yes' if has_expert else 'no'})")
    return EXIT_OK


def cmd_synth(args) -> int:
    gold = _read_corpus(args, args.gold)
    with open(args.profiles, encoding="utf-8") as f:
        raw = json.load(f)
    profiles = [AnnotatorProfile.from_dict(d) for d in raw]
    corpus = synth_generate(gold, profiles, args.coverage, args.seed or 0)
    save_corpus(corpus, args.out)
    write_run_manifest(os.path.dirname(args.out) or ".", args, None, [args.gold, args.profiles])
    print(
        f"wrote {len(corpus.sentences)} sentences, {corpus.num_annotators} annotators, "
        f"{corpus.num_annotations} annotations to {args.out} (expert column: yes)"
    )
    return EXIT_OK


def cmd_filter(args) -> int:
    corpus = _read_corpus(args)
    result = filter_annotators(corpus, args.filter_k)
    save_corpus(result.corpus, args.out)
    audit_path = args.out + ".audit.txt"
    with open(audit_path, "w", encoding="utf-8") as f:
        f.write(result.report)
    write_run_manifest(os.path.dirname(args.out) or ".", args, None, [args.corpus])
    print(result.report, end="")
    print(f"filtered corpus: {args.out}\naudit: {audit_path}")
    return EXIT_OK


def cmd_select(args) -> int:
    corpus = _read_corpus(args)
    selected = select_informative(corpus, args.fraction)
    report = selection_report(corpus, selected)
    with open(args.out, "w", encoding="utf-8") as f:
        for sid in selected:
            f.write(sid + "\n")
    with open(args.out + ".audit.txt", "w", encoding="utf-8") as f:
        f.write(report)
    write_run_manifest(os.path.dirname(args.out) or ".", args, None, [args.corpus])
    print(f"selected {len(selected)} sentences -> {args.out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = export_embeddings(model, args.out)
    write_run_manifest(os.path.dirname(args.out) or ".", args, model.config, [])
    print(f"wrote {rows} embedding rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check()
    for group in sorted(report.per_group):
        print(f"{group:<22} max rel err {report.per_group[group]:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"overall max rel err {report.max_rel_err:.3e} "
          f"(tolerance {report.tolerance:g}) -> {status}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--expert-column", action="store_true",
                   help="treat the last column as expert labels")
    p.add_argument("--num-annotators", type=int, default=None,
                   help="annotator column count (default: infer)")


def build_parser() -> _Parser:
    parser = _Parser(prog="crowdner", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", required=True,
                   choices=[m.value for m in TrainingMode])
    p.add_argument("--expert-fraction", type=float, default=None)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dev", help="dev corpus with expert labels")
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--inference-expert", choices=("centroid", "learned"),
                   default="centroid")
    p.add_argument("--out", default=None)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", help="majority-vote aggregation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("synth", help="generate a synthetic crowd corpus")
    p.add_argument("--gold", required=True, help="expert-labeled corpus")
    p.add_argument("--profiles", required=True, help="JSON list of profiles")
    p.add_argument("--coverage", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", help="drop the lowest-quality annotators")
    p.add_argument("--corpus", required=True)
    p.add_argument("--filter-k", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("select", help="rank and select informative sentences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("export-embeddings", help="annotator embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("AA_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
