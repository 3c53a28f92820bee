"""Optimization loop and model persistence.

Gradients come from reverse-mode autodiff through the full stack (generator
matrix -> adapters -> frozen transformer -> BiLSTM -> CRF) and are verified
against central finite differences by `gradient_check`.  Training is
bitwise reproducible for a fixed seed: shuffling, dropout, and every
parameter initialization draw from explicit seeded generators.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import random
import shutil
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .config import TrainConfig
from .corpus import EXPERT, CrowdCorpus, Sentence, make_tagset
from .crowd import TrainInstance, TrainingMode, build_instances
from .encoder import AdapterManifest, Vocab, build_vocab
from .evaluation import evaluate
from .model import AnnotatorTagger, build_model, decode_corpus
from .tagger import nll_loss_batch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "crowdner-checkpoint-v1"


class NumericalError(RuntimeError):
    """Non-finite loss or a failed numerical check."""


class CheckpointError(RuntimeError):
    """Unreadable or corrupted checkpoint."""


def timestep_dropout(reps: Tensor, p: float, generator: torch.Generator) -> Tensor:
    """Zero whole per-position vectors with probability p and scale the
    survivors by 1/(1-p).  reps: (..., n, d)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0,1)")
    if p == 0.0:
        return reps
    shape = reps.shape[:-1] + (1,)
    keep = (torch.rand(shape, generator=generator, dtype=reps.dtype) >= p).to(reps.dtype)
    return reps * keep / (1.0 - p)


def instance_losses(
    batch: Sequence[TrainInstance],
    model: AnnotatorTagger,
    dropout_p: float = 0.0,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Per-instance CRF negative log-likelihoods, ordered like `batch`.

    Same-length instances are forwarded together; each instance's adapters
    come from its own annotator embedding.
    """
    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(batch):
        groups.setdefault(len(inst.tokens), []).append(i)

    pieces = []
    positions: list[int] = []
    for length in sorted(groups):
        idx = groups[length]
        ids = torch.stack([model.vocab.encode(batch[i].tokens) for i in idx])
        ann = torch.tensor([batch[i].annotator for i in idx], dtype=torch.long)
        reps = model.represent(ids, model.embedding_for_ids(ann))
        if dropout_p > 0.0:
            reps = timestep_dropout(reps, dropout_p, generator)
        o = model.emissions(model.features(reps))
        y = torch.stack([model.encode_tags(batch[i].tags) for i in idx])
        pieces.append(nll_loss_batch(o, model.trans, y))
        positions.extend(idx)

    inverse = torch.empty(len(batch), dtype=torch.long)
    inverse[torch.tensor(positions)] = torch.arange(len(batch))
    return torch.cat(pieces)[inverse]


def compute_gradients(
    batch: Sequence[TrainInstance],
    model: AnnotatorTagger,
    dropout_p: float = 0.0,
    generator: torch.Generator | None = None,
) -> tuple[dict[str, Tensor], float]:
    """Gradients of the mean batch loss for every trainable tensor, plus the
    loss value.  Frozen encoder weights receive no gradient."""
    if not batch:
        raise ValueError("empty batch")
    losses = instance_losses(batch, model, dropout_p, generator)
    finite = torch.isfinite(losses)
    if not bool(finite.all()):
        i = int((~finite).nonzero()[0])
        raise NumericalError(
            f"non-finite loss for instance {batch[i].sentence_id} "
            f"(annotator {batch[i].annotator})"
        )
    loss = losses.mean()
    params = model.trainable_tensors()
    grads = torch.autograd.grad(loss, list(params.values()))
    return {name: g.detach() for name, g in zip(params, grads)}, float(loss.detach())


def clip_gradients(grads: dict[str, Tensor], max_norm: float = 5.0) -> dict[str, Tensor]:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm; otherwise return them unchanged."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads)
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def init_adam_state(params: dict[str, Tensor]) -> dict[str, dict[str, Tensor]]:
    return {
        name: {"m": torch.zeros_like(p), "v": torch.zeros_like(p)}
        for name, p in params.items()
    }


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: dict[str, dict[str, Tensor]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """Standard bias-corrected Adam update, in place on params and state."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state[name]["m"], state[name]["v"]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))


# ---------------------------------------------------------------------------
# Checkpoints


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(model: AnnotatorTagger, path: str, mode: str | None = None) -> None:
    """Write the checkpoint directory: meta.json, manifest.txt, index.tsv,
    and one raw little-endian float32 file per tensor."""
    os.makedirs(os.path.join(path, "tensors"), exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(model.config),
        "tagset": list(model.tagset),
        "vocab": list(model.vocab.tokens[2:]),  # reserved entries are implicit
        "num_annotators": model.num_annotators,
        "has_expert_row": model.has_expert_row,
        "mode": mode,
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write(model.manifest.to_text())

    index_lines = ["name\tshape\tnum_bytes\tsha256"]
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ValueError(f"checkpoint tensors must be float32; {name} is {tensor.dtype}")
        data = tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
        with open(os.path.join(path, "tensors", name + ".bin"), "wb") as f:
            f.write(data)
        shape = "x".join(str(d) for d in tensor.shape)
        index_lines.append(f"{name}\t{shape}\t{len(data)}\t{_sha256(data)}")
    with open(os.path.join(path, "index.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(index_lines) + "\n")


def load_checkpoint(path: str) -> AnnotatorTagger:
    """Rebuild the model and restore every tensor bitwise; every tensor file
    is checksum-verified against the index."""
    try:
        with open(os.path.join(path, "meta.json"), encoding="utf-8") as f:
            meta = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint at {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unexpected checkpoint format {meta.get('format')!r}")

    config = TrainConfig(**meta["config"])
    model = build_model(
        Vocab(meta["vocab"]),
        meta["tagset"],
        meta["num_annotators"],
        meta["has_expert_row"],
        config,
    )

    with open(os.path.join(path, "index.tsv"), encoding="utf-8") as f:
        rows = f.read().splitlines()[1:]
    state = {}
    for row in rows:
        if not row.strip():
            continue
        name, shape_s, num_bytes, digest = row.split("\t")
        with open(os.path.join(path, "tensors", name + ".bin"), "rb") as f:
            data = f.read()
        if len(data) != int(num_bytes) or _sha256(data) != digest:
            raise CheckpointError(f"checksum mismatch for tensor {name}")
        shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        array = np.frombuffer(data, dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(array.copy())
    model.load_state_dict(state, strict=True)
    return model


# ---------------------------------------------------------------------------
# The training loop


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    dev_precision: float | None = None
    dev_recall: float | None = None
    dev_f1: float | None = None


@dataclass
class TrainResult:
    out_dir: str
    final_dir: str
    metrics: list[EpochMetrics]
    model: AnnotatorTagger


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    lines = ["epoch,loss,dev_precision,dev_recall,dev_f1"]
    for m in metrics:
        dev = (
            f"{m.dev_precision:.2f},{m.dev_recall:.2f},{m.dev_f1:.2f}"
            if m.dev_f1 is not None
            else ",,"
        )
        lines.append(f"{m.epoch},{m.loss:.6f},{dev}")
    return "\n".join(lines) + "\n"


def train(
    corpus: CrowdCorpus,
    mode: TrainingMode | str,
    config: TrainConfig,
    out_dir: str,
    dev_corpus: CrowdCorpus | None = None,
    expert_fraction: float | None = None,
) -> TrainResult:
    """Train one model: seeded shuffling, mini-batches, timestep dropout on
    the word representations, gradient clipping, Adam.  Writes a checkpoint
    per epoch plus `final` (the best dev-F1 epoch when a dev corpus is
    given, else the last), and a metrics CSV."""
    mode = TrainingMode(mode)
    instances = build_instances(corpus, mode, expert_fraction)
    too_long = [i for i in instances if len(i.tokens) > config.max_len]
    if too_long:
        raise ValueError(
            f"{len(too_long)} instances exceed max_len={config.max_len}"
        )

    vocab = build_vocab(corpus)
    num_rows = corpus.num_annotators if mode.annotator_aware else 1
    model = build_model(
        vocab,
        corpus.tagset,
        num_rows,
        mode is TrainingMode.ANNOTATOR_AWARE_SUP,
        config,
    )
    inference = "learned" if mode is TrainingMode.ANNOTATOR_AWARE_SUP else "centroid"

    shuffle_rng = random.Random(config.seed)
    dropout_gen = torch.Generator().manual_seed((config.seed + 1) * 2654435761 % 2**63)
    params = model.trainable_tensors()
    state = init_adam_state(params)
    step = 0

    os.makedirs(out_dir, exist_ok=True)
    metrics: list[EpochMetrics] = []
    best_f1, best_dir = -1.0, None
    logger.info(
        "training mode=%s instances=%d epochs=%d seed=%d",
        mode.value, len(instances), config.epochs, config.seed,
    )

    for epoch in range(1, config.epochs + 1):
        order = list(instances)
        shuffle_rng.shuffle(order)
        loss_sum, seen = 0.0, 0
        for at in range(0, len(order), config.batch_size):
            chunk = order[at : at + config.batch_size]
            grads, loss = compute_gradients(chunk, model, config.dropout_p, dropout_gen)
            grads = clip_gradients(grads, config.clip_norm)
            step += 1
            adam_step(params, grads, state, config.learning_rate, t=step)
            loss_sum += loss * len(chunk)
            seen += len(chunk)

        row = EpochMetrics(epoch=epoch, loss=loss_sum / seen)
        if dev_corpus is not None:
            preds = decode_corpus(model, dev_corpus, expert=inference)
            report = evaluate(
                [preds[s.id] for s in dev_corpus.sentences],
                [dev_corpus.expert_labels[s.id] for s in dev_corpus.sentences],
            )
            row.dev_precision, row.dev_recall, row.dev_f1 = (
                report.precision, report.recall, report.f1,
            )
        metrics.append(row)
        logger.info("epoch %d: loss %.4f dev_f1 %s", epoch, row.loss, row.dev_f1)

        epoch_dir = os.path.join(out_dir, f"epoch_{epoch:04d}")
        save_checkpoint(model, epoch_dir, mode=mode.value)
        if dev_corpus is not None and row.dev_f1 > best_f1:
            best_f1, best_dir = row.dev_f1, epoch_dir

    final_dir = os.path.join(out_dir, "final")
    source = best_dir if best_dir is not None else os.path.join(
        out_dir, f"epoch_{config.epochs:04d}"
    )
    if os.path.exists(final_dir):
        shutil.rmtree(final_dir)
    shutil.copytree(source, final_dir)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(metrics_csv(metrics))

    final_model = model if source.endswith(f"epoch_{config.epochs:04d}") else load_checkpoint(final_dir)
    return TrainResult(out_dir, final_dir, metrics, final_model)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


TINY_CONFIG = TrainConfig(
    dropout_p=0.0,
    seed=11,
    d_model=8,
    num_layers=2,
    num_heads=2,
    d_ff=16,
    max_len=16,
    d_adapter=2,
    d_ann=2,
    d_hidden=4,
)

_GROUPS = (
    ("theta", "generator_matrix"),
    ("ann_emb", "annotator_embeddings"),
    ("lstm.", "bilstm"),
    ("emit.weight", "emission_weight"),
    ("emit.bias", "emission_bias"),
    ("trans", "crf_transitions"),
)


def _group_of(name: str) -> str:
    for prefix, group in _GROUPS:
        if name.startswith(prefix):
            return group
    return name


@dataclass
class GradCheckReport:
    per_group: dict[str, float]  # max relative error per trainable group
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _tiny_batch() -> tuple[CrowdCorpus, list[TrainInstance]]:
    tagset = make_tagset(("X",))  # O, B-X, I-X
    sentences = (
        Sentence("s0", ("the", "red", "fox")),
        Sentence("s1", ("blue", "bird", "sang")),
        Sentence("s2", ("fox", "ran", "off")),
    )
    annotations = {
        "s0": {0: ("O", "B-X", "I-X"), 1: ("B-X", "I-X", "O")},
        "s1": {1: ("O", "O", "B-X"), 2: ("B-X", "O", "O")},
        "s2": {0: ("O", "B-X", "O"), 2: ("I-X", "O", "B-X")},
    }
    expert = {
        "s0": ("O", "B-X", "I-X"),
        "s1": ("O", "B-X", "O"),
        "s2": ("B-X", "O", "O"),
    }
    corpus = CrowdCorpus(tagset, sentences, 3, annotations, expert)
    instances = build_instances(corpus, TrainingMode.ANNOTATOR_AWARE_SUP, expert_fraction=1.0)
    return corpus, instances


def gradient_check(
    config: TrainConfig | None = None,
    step_size: float = 1e-5,
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of a tiny supervised model against central
    finite differences in float64, for every trainable group."""
    config = config or TINY_CONFIG
    corpus, instances = _tiny_batch()
    model = build_model(
        build_vocab(corpus), corpus.tagset, corpus.num_annotators, True, config
    ).double()

    def loss_value() -> float:
        with torch.no_grad():
            return float(instance_losses(instances, model).mean())

    grads, _ = compute_gradients(instances, model)
    per_group: dict[str, float] = {}
    with torch.no_grad():
        for name, param in model.trainable_tensors().items():
            flat = param.view(-1)
            analytic = grads[name].view(-1)
            group = _group_of(name)
            worst = per_group.get(group, 0.0)
            for j in range(flat.numel()):
                original = float(flat[j])
                flat[j] = original + step_size
                up = loss_value()
                flat[j] = original - step_size
                down = loss_value()
                flat[j] = original
                fd = (up - down) / (2.0 * step_size)
                a = float(analytic[j])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                worst = max(worst, err)
            per_group[group] = worst
    return GradCheckReport(per_group, max(per_group.values()), tolerance)
