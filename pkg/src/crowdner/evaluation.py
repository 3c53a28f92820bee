"""Entity-level scoring, paired significance testing, embedding projection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .corpus import EntitySpan, extract_spans

__all__ = [
    "EntitySpan",
    "ScoreReport",
    "evaluate",
    "paired_t_test",
    "pca_project",
    "export_embeddings",
]


@dataclass
class TypeScore:
    gold: int
    predicted: int
    correct: int

    @property
    def precision(self) -> float:
        return 100.0 * self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return 100.0 * self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ScoreReport:
    """Micro-averaged exact-match precision/recall/F1 on the percent scale."""

    gold: int
    predicted: int
    correct: int
    per_type: dict[str, TypeScore] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return 100.0 * self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return 100.0 * self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def render_text(self) -> str:
        lines = [
            f"gold {self.gold}  predicted {self.predicted}  correct {self.correct}",
            f"{'overall':<10} P {self.precision:6.2f}  R {self.recall:6.2f}  F1 {self.f1:6.2f}",
        ]
        for label in sorted(self.per_type):
            t = self.per_type[label]
            lines.append(
                f"{label:<10} P {t.precision:6.2f}  R {t.recall:6.2f}  F1 {t.f1:6.2f}"
                f"  (gold {t.gold}, pred {t.predicted}, correct {t.correct})"
            )
        return "\n".join(lines) + "\n"

    def render_csv(self) -> str:
        lines = ["label,precision,recall,f1,gold,predicted,correct"]
        lines.append(
            f"overall,{self.precision:.2f},{self.recall:.2f},{self.f1:.2f},"
            f"{self.gold},{self.predicted},{self.correct}"
        )
        for label in sorted(self.per_type):
            t = self.per_type[label]
            lines.append(
                f"{label},{t.precision:.2f},{t.recall:.2f},{t.f1:.2f},"
                f"{t.gold},{t.predicted},{t.correct}"
            )
        return "\n".join(lines) + "\n"


def evaluate(
    predictions: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]
) -> ScoreReport:
    """Score aligned BIO sequences; a predicted span counts iff it matches a
    gold span exactly in (start, end, type)."""
    if len(predictions) != len(gold):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(gold)} gold sentences"
        )
    report = ScoreReport(0, 0, 0)
    for i, (pred, ref) in enumerate(zip(predictions, gold)):
        if len(pred) != len(ref):
            raise ValueError(
                f"sentence {i}: prediction length {len(pred)} != gold length {len(ref)}"
            )
        pred_spans = extract_spans(pred)
        gold_spans = extract_spans(ref)
        matched = pred_spans & gold_spans
        report.gold += len(gold_spans)
        report.predicted += len(pred_spans)
        report.correct += len(matched)
        for span in gold_spans:
            report.per_type.setdefault(span.label, TypeScore(0, 0, 0)).gold += 1
        for span in pred_spans:
            report.per_type.setdefault(span.label, TypeScore(0, 0, 0)).predicted += 1
        for span in matched:
            report.per_type[span.label].correct += 1
    return report


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value over per-run score lists.

    Degenerate zero-variance differences give p = 1.0 when the mean
    difference is 0, else p = 0.0.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError(f"length mismatch: {len(scores_a)} vs {len(scores_b)}")
    n = len(scores_a)
    if n < 2:
        raise ValueError("need at least two paired scores")
    diffs = np.asarray(scores_a, dtype=np.float64) - np.asarray(scores_b, dtype=np.float64)
    mean = diffs.mean()
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    # two-sided p via the regularized incomplete beta function
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def pca_project(embeddings: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top-k principal components.

    Returns (coords of shape (M, k), explained-variance ratios of shape (k,)).
    Eigenvector signs are fixed so each component's largest-magnitude entry
    is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D array with at least two rows")
    m, d = x.shape
    if k > d:
        raise ValueError(f"k={k} exceeds embedding dimension {d}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    for j in range(d):
        col = eigvecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, j] = -col
    total = eigvals.sum()
    ratios = eigvals[:k] / total if total > 0 else np.zeros(k)
    return centered @ eigvecs[:, :k], ratios


def export_embeddings(model, out_path: str) -> int:
    """Write one CSV row per annotator plus the expert row (learned when the
    model has an expert slot, otherwise the crowd centroid), with raw
    embedding values and 2-D principal-component coordinates.  Returns the
    number of rows written."""
    from .crowd import expert_centroid  # local import to avoid a cycle

    crowd_rows = model.crowd_embeddings().detach().cpu().numpy()
    if model.has_expert_row:
        expert = model.expert_embedding().detach().cpu().numpy()
        expert_kind = "learned"
    else:
        expert = expert_centroid(model.crowd_embeddings()).detach().cpu().numpy()
        expert_kind = "centroid"
    rows = np.vstack([crowd_rows, expert[None, :]])
    coords, _ = pca_project(rows, k=2)

    d = rows.shape[1]
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["label", "is_expert"]
            + [f"e{j}" for j in range(d)]
            + ["pc0", "pc1"]
        )
        for i in range(rows.shape[0]):
            is_expert = i == rows.shape[0] - 1
            label = f"expert({expert_kind})" if is_expert else f"a{i}"
            writer.writerow(
                [label, int(is_expert)]
                + [f"{v:.8f}" for v in rows[i]]
                + [f"{v:.8f}" for v in coords[i]]
            )
    return rows.shape[0]
