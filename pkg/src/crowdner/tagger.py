"""BiLSTM feature extraction and linear-chain CRF scoring/inference.

The transition matrix has shape (num_tags + 1, num_tags); its last row is
the virtual start state, so score(y) = T[start, y_1] + o_1[y_1] +
sum_i (T[y_{i-1}, y_i] + o_i[y_i]).  There is no end transition.
"""

from __future__ import annotations

import torch
from torch import Tensor


def start_row(transitions: Tensor) -> int:
    return transitions.shape[0] - 1


def bilstm_encode(reps: Tensor, lstm: torch.nn.LSTM) -> Tensor:
    """Run a bidirectional LSTM with zero initial states.

    reps: (n, d) or (batch, n, d); output gets feature size 2*hidden.
    """
    squeeze = reps.dim() == 2
    x = reps.unsqueeze(0) if squeeze else reps
    out, _ = lstm(x)
    return out.squeeze(0) if squeeze else out


def emission_scores(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position affine map onto tag scores: o_i = W h_i + b."""
    if features.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"feature size {features.shape[-1]} != weight input size {weight.shape[1]}"
        )
    return features @ weight.T + bias


def _check_instance(o: Tensor, transitions: Tensor) -> int:
    num_tags = o.shape[-1]
    if transitions.shape != (num_tags + 1, num_tags):
        raise ValueError(
            f"transitions shape {tuple(transitions.shape)} does not match "
            f"{num_tags} tags (+1 start row)"
        )
    return num_tags


def sequence_score(o: Tensor, transitions: Tensor, y: Tensor) -> Tensor:
    """Score of one tag sequence: emissions plus transitions from the start."""
    num_tags = _check_instance(o, transitions)
    if y.min() < 0 or y.max() >= num_tags:
        raise IndexError(f"tag indices outside [0, {num_tags})")
    score = transitions[start_row(transitions), y[0]] + o[0, y[0]]
    for i in range(1, len(y)):
        score = score + transitions[y[i - 1], y[i]] + o[i, y[i]]
    return score


def log_partition(o: Tensor, transitions: Tensor) -> Tensor:
    """log sum over all tag sequences of exp(score), by the forward
    algorithm with per-step log-sum-exp."""
    num_tags = _check_instance(o, transitions)
    alpha = transitions[start_row(transitions)] + o[0]
    for i in range(1, o.shape[0]):
        alpha = torch.logsumexp(alpha.unsqueeze(1) + transitions[:num_tags], dim=0) + o[i]
    return torch.logsumexp(alpha, dim=0)


def nll_loss(o: Tensor, transitions: Tensor, y: Tensor) -> Tensor:
    """Sentence-level negative log-likelihood; non-negative."""
    return log_partition(o, transitions) - sequence_score(o, transitions, y)


def viterbi_decode(o: Tensor, transitions: Tensor) -> tuple[list[int], float]:
    """Best tag sequence and its score; ties break toward the lowest index."""
    num_tags = _check_instance(o, transitions)
    n = o.shape[0]
    delta = transitions[start_row(transitions)] + o[0]
    backptr = torch.empty((n, num_tags), dtype=torch.long)
    for i in range(1, n):
        cand = delta.unsqueeze(1) + transitions[:num_tags]
        # max over dim 0 returns the first (= lowest) index on ties
        best, idx = cand.max(dim=0)
        delta = best + o[i]
        backptr[i] = idx
    score, last = delta.max(dim=0)
    path = [int(last)]
    for i in range(n - 1, 0, -1):
        path.append(int(backptr[i, path[-1]]))
    path.reverse()
    return path, float(score)


# ---------------------------------------------------------------------------
# Batched versions over same-length instances (training/decoding fast path)


def sequence_score_batch(o: Tensor, transitions: Tensor, y: Tensor) -> Tensor:
    """Batched sequence_score: o (B, n, T), y (B, n) -> (B,)."""
    num_tags = _check_instance(o, transitions)
    b, n, _ = o.shape
    emit = o.gather(2, y.unsqueeze(2)).squeeze(2).sum(dim=1)
    trans = transitions[start_row(transitions)][y[:, 0]]
    if n > 1:
        flat = transitions[:num_tags].reshape(-1)
        trans = trans + flat[y[:, :-1] * num_tags + y[:, 1:]].sum(dim=1)
    return emit + trans


def log_partition_batch(o: Tensor, transitions: Tensor) -> Tensor:
    """Batched log_partition: o (B, n, T) -> (B,)."""
    num_tags = _check_instance(o, transitions)
    alpha = transitions[start_row(transitions)].unsqueeze(0) + o[:, 0]
    for i in range(1, o.shape[1]):
        alpha = torch.logsumexp(
            alpha.unsqueeze(2) + transitions[:num_tags].unsqueeze(0), dim=1
        ) + o[:, i]
    return torch.logsumexp(alpha, dim=1)


def nll_loss_batch(o: Tensor, transitions: Tensor, y: Tensor) -> Tensor:
    return log_partition_batch(o, transitions) - sequence_score_batch(o, transitions, y)


def viterbi_decode_batch(o: Tensor, transitions: Tensor) -> tuple[Tensor, Tensor]:
    """Batched Viterbi: o (B, n, T) -> (paths (B, n) long, scores (B,))."""
    num_tags = _check_instance(o, transitions)
    b, n, _ = o.shape
    delta = transitions[start_row(transitions)].unsqueeze(0) + o[:, 0]
    backptr = torch.empty((b, n, num_tags), dtype=torch.long)
    for i in range(1, n):
        cand = delta.unsqueeze(2) + transitions[:num_tags].unsqueeze(0)
        best, idx = cand.max(dim=1)
        delta = best + o[:, i]
        backptr[:, i] = idx
    scores, last = delta.max(dim=1)
    paths = torch.empty((b, n), dtype=torch.long)
    paths[:, n - 1] = last
    for i in range(n - 1, 0, -1):
        paths[:, i - 1] = backptr[:, i].gather(1, paths[:, i].unsqueeze(1)).squeeze(1)
    return paths, scores
