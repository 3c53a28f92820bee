"""The assembled annotator-aware tagger.

Pipeline per instance: frozen transformer with adapters generated from the
instance's annotator embedding, a trainable BiLSTM, an emission projection,
and a linear-chain CRF.  Trainable groups: generator matrix theta,
annotator embeddings, BiLSTM, emission weight/bias, CRF transitions.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import torch
from torch import Tensor, nn

from .config import TrainConfig
from .corpus import EXPERT, CrowdCorpus, repair_bio
from .encoder import AdapterManifest, FrozenEncoder, Vocab, pgn_generate, unpack_params
from . import tagger


class AnnotatorTagger(nn.Module):
    def __init__(
        self,
        vocab: Vocab,
        tagset: Sequence[str],
        num_annotators: int,
        has_expert_row: bool,
        config: TrainConfig,
    ):
        super().__init__()
        if num_annotators < 1:
            raise ValueError("need at least one annotator row")
        self.vocab = vocab
        self.tagset = tuple(tagset)
        self.tag_index = {t: i for i, t in enumerate(self.tagset)}
        self.num_annotators = num_annotators
        self.has_expert_row = has_expert_row
        self.config = config

        torch.manual_seed(config.seed)
        self.frozen = FrozenEncoder(
            vocab_size=len(vocab),
            d_model=config.d_model,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            d_ff=config.d_ff,
            max_len=config.max_len,
            seed=config.seed,
        )
        self.manifest = AdapterManifest.build(
            config.num_layers, config.adapted_layers, config.d_model, config.d_adapter
        )

        gen = torch.Generator().manual_seed(config.seed + 1)
        rows = num_annotators + (1 if has_expert_row else 0)
        self.ann_emb = nn.Parameter(
            torch.randn(rows, config.d_ann, generator=gen) * 0.1
        )
        self.theta = nn.Parameter(
            torch.randn(self.manifest.total_size, config.d_ann, generator=gen) * 0.01
        )
        self.lstm = nn.LSTM(
            config.d_model, config.d_hidden, batch_first=True, bidirectional=True
        )
        self.emit = nn.Linear(2 * config.d_hidden, len(self.tagset))
        self.trans = nn.Parameter(torch.zeros(len(self.tagset) + 1, len(self.tagset)))
        with torch.no_grad():
            self.trans.copy_(
                torch.randn(self.trans.shape, generator=gen) * 0.01
            )

    # -- embeddings ---------------------------------------------------------

    def crowd_embeddings(self) -> Tensor:
        return self.ann_emb[: self.num_annotators]

    def expert_embedding(self) -> Tensor:
        if not self.has_expert_row:
            raise ValueError("model has no learned expert row (unsupervised training)")
        return self.ann_emb[self.num_annotators]

    def embedding_for_ids(self, annotator_ids: Tensor) -> Tensor:
        """Map annotator ids to embedding rows; EXPERT selects the extra row."""
        ids = annotator_ids.clone()
        is_expert = ids == EXPERT
        if bool(is_expert.any()):
            if not self.has_expert_row:
                raise ValueError("EXPERT instances require a model with an expert row")
            ids[is_expert] = self.num_annotators
        if bool((ids < 0).any()) or bool((ids >= self.ann_emb.shape[0]).any()):
            raise IndexError("annotator id outside the embedding table")
        return self.ann_emb.index_select(0, ids)

    # -- forward pieces -----------------------------------------------------

    def represent(self, token_ids: Tensor, embedding: Tensor) -> Tensor:
        """Annotator-aware representations.

        token_ids (B, n) with embedding (B, d_ann) gives per-instance
        adapters; token_ids (n,) or (B, n) with embedding (d_ann,) shares
        one adapter set.
        """
        vector = pgn_generate(embedding, self.theta)
        adapters = unpack_params(vector, self.manifest)
        return self.frozen(token_ids, adapters)

    def features(self, reps: Tensor) -> Tensor:
        return tagger.bilstm_encode(reps, self.lstm)

    def emissions(self, features: Tensor) -> Tensor:
        return tagger.emission_scores(features, self.emit.weight, self.emit.bias)

    def scores_for(self, token_ids: Tensor, embedding: Tensor) -> Tensor:
        return self.emissions(self.features(self.represent(token_ids, embedding)))

    # -- tags ---------------------------------------------------------------

    def encode_tags(self, tags: Sequence[str]) -> Tensor:
        try:
            return torch.tensor([self.tag_index[t] for t in tags], dtype=torch.long)
        except KeyError as e:
            raise ValueError(f"tag {e.args[0]!r} not in the model tagset") from None

    def decode_tags(self, indices: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.tagset[i] for i in indices)

    # -- bookkeeping --------------------------------------------------------

    def trainable_tensors(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen_tensors(self) -> dict[str, Tensor]:
        out = {n: p for n, p in self.named_parameters() if not p.requires_grad}
        out.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return dict(sorted(out.items()))

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.frozen_tensors().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_model(
    vocab: Vocab,
    tagset: Sequence[str],
    num_annotators: int,
    has_expert_row: bool,
    config: TrainConfig,
) -> AnnotatorTagger:
    return AnnotatorTagger(vocab, tagset, num_annotators, has_expert_row, config)


def inference_embedding(model: AnnotatorTagger, kind: str = "centroid") -> Tensor:
    """Expert identity used at test time: crowd centroid or the learned row."""
    from .crowd import expert_centroid

    if kind == "centroid":
        return expert_centroid(model.crowd_embeddings())
    if kind == "learned":
        return model.expert_embedding()
    raise ValueError(f"unknown inference embedding kind {kind!r}")


def decode_corpus(
    model: AnnotatorTagger,
    corpus: CrowdCorpus,
    expert: str = "centroid",
) -> dict[str, tuple[str, ...]]:
    """Viterbi-decode every sentence with the expert identity, grouping
    same-length sentences into batches; outputs are BIO-repaired."""
    embedding = inference_embedding(model, expert)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(corpus.sentences):
        by_len.setdefault(len(s), []).append(i)

    out: dict[str, tuple[str, ...]] = {}
    with torch.no_grad():
        for length in sorted(by_len):
            idx = by_len[length]
            ids = torch.stack([model.vocab.encode(corpus.sentences[i].tokens) for i in idx])
            o = model.scores_for(ids, embedding)
            paths, _ = tagger.viterbi_decode_batch(o, model.trans)
            for row, i in enumerate(idx):
                tags = model.decode_tags(paths[row].tolist())
                out[corpus.sentences[i].id] = repair_bio(tags, corpus.entity_types)
    return out
