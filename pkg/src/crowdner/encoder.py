"""Annotator-aware contextual encoding.

A frozen mini-transformer stands in for a large pretrained encoder; the
only representation-side trainable pieces are bottleneck adapters whose
parameters are generated per annotator as a linear map of the annotator
embedding (V = theta @ e), unpacked into tensors via a fixed manifest.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .corpus import CrowdCorpus

PAD, UNK = 0, 1

# adapter slots per transformer layer, in pack order
ATTN_SLOT, FFN_SLOT = "attn", "ffn"
TENSOR_NAMES = ("w1", "w2", "b1", "b2")


class Vocab:
    """Token-to-index map with reserved PAD/UNK entries.

    Order is deterministic: reserved entries, then corpus tokens by
    descending frequency with lexicographic tie-break.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = ("<pad>", "<unk>") + tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> Tensor:
        return torch.tensor([self.index.get(t, UNK) for t in tokens], dtype=torch.long)


def build_vocab(corpus: CrowdCorpus) -> Vocab:
    if not corpus.sentences:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for s in corpus.sentences for t in s.tokens)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ordered)


def sinusoidal_positions(max_len: int, d_model: int) -> Tensor:
    """Fixed sin/cos position table of shape (max_len, d_model)."""
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model)
    )
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    return F.gelu(x, approximate="tanh")


@dataclass
class AdapterTensors:
    """One adapter's tensors; leading batch dims allowed on all four."""

    w1: Tensor  # (..., d_adapter, d_model)
    b1: Tensor  # (..., d_adapter)
    w2: Tensor  # (..., d_model, d_adapter)
    b2: Tensor  # (..., d_model)


def adapter_forward(h: Tensor, adapter: AdapterTensors) -> Tensor:
    """Bottleneck adapter with residual: W2 gelu(W1 h + b1) + b2 + h.

    Supports shared weights (w1 2-D, h (..., d_model)) and per-instance
    weights (w1 (B, d_adapter, d_model), h (B, n, d_model)).
    """
    if adapter.w1.dim() == 2:
        if h.shape[-1] != adapter.w1.shape[1]:
            raise ValueError(
                f"input size {h.shape[-1]} != adapter input size {adapter.w1.shape[1]}"
            )
        mid = gelu(h @ adapter.w1.T + adapter.b1)
        return mid @ adapter.w2.T + adapter.b2 + h
    if h.dim() != 3 or h.shape[0] != adapter.w1.shape[0]:
        raise ValueError("per-instance adapters need h of shape (B, n, d_model)")
    mid = gelu(torch.einsum("bad,bnd->bna", adapter.w1, h) + adapter.b1.unsqueeze(1))
    return (
        torch.einsum("bda,bna->bnd", adapter.w2, mid) + adapter.b2.unsqueeze(1) + h
    )


AdapterParams = Mapping[tuple[int, str], AdapterTensors]


@dataclass(frozen=True)
class ManifestEntry:
    layer: int
    slot: str
    tensor: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class AdapterManifest:
    """Fixed bijection between adapter tensors and a flat parameter vector.

    Pack order: adapted layers bottom-to-top, attention adapter before the
    feed-forward adapter, and w1, w2, b1, b2 within an adapter.
    """

    entries: tuple[ManifestEntry, ...]
    total_size: int

    @classmethod
    def build(
        cls, num_layers: int, num_adapted_layers: int, d_model: int, d_adapter: int
    ) -> "AdapterManifest":
        if not 0 < num_adapted_layers <= num_layers:
            raise ValueError(
                f"num_adapted_layers={num_adapted_layers} outside [1, {num_layers}]"
            )
        shapes = {
            "w1": (d_adapter, d_model),
            "w2": (d_model, d_adapter),
            "b1": (d_adapter,),
            "b2": (d_model,),
        }
        entries = []
        offset = 0
        # adapters live in the top num_adapted_layers layers
        for layer in range(num_layers - num_adapted_layers, num_layers):
            for slot in (ATTN_SLOT, FFN_SLOT):
                for name in TENSOR_NAMES:
                    shape = shapes[name]
                    entries.append(ManifestEntry(layer, slot, name, offset, shape))
                    offset += math.prod(shape)
        return cls(tuple(entries), offset)

    @property
    def adapted_layers(self) -> tuple[int, ...]:
        return tuple(sorted({e.layer for e in self.entries}))

    def to_text(self) -> str:
        lines = ["layer\tslot\ttensor\toffset\tshape"]
        for e in self.entries:
            shape = "x".join(str(d) for d in e.shape)
            lines.append(f"{e.layer}\t{e.slot}\t{e.tensor}\t{e.offset}\t{shape}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AdapterManifest":
        entries = []
        total = 0
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            layer, slot, tensor, offset, shape = line.split("\t")
            e = ManifestEntry(
                int(layer), slot, tensor, int(offset), tuple(int(d) for d in shape.split("x"))
            )
            entries.append(e)
            total = max(total, e.offset + e.size)
        return cls(tuple(entries), total)


def pack_params(adapters: AdapterParams, manifest: AdapterManifest) -> Tensor:
    """Flatten adapter tensors into the manifest's vector layout."""
    pieces = []
    for e in manifest.entries:
        tensor = getattr(adapters[(e.layer, e.slot)], e.tensor)
        if tensor.shape[-len(e.shape):] != e.shape:
            raise ValueError(f"{e.tensor} at layer {e.layer}/{e.slot} has shape "
                             f"{tuple(tensor.shape)}, manifest says {e.shape}")
        lead = tensor.shape[: tensor.dim() - len(e.shape)]
        pieces.append(tensor.reshape(*lead, e.size))
    return torch.cat(pieces, dim=-1)


def unpack_params(vector: Tensor, manifest: AdapterManifest) -> dict[tuple[int, str], AdapterTensors]:
    """Inverse of pack_params; works on (|V|,) or batched (B, |V|) vectors."""
    if vector.shape[-1] != manifest.total_size:
        raise ValueError(
            f"vector length {vector.shape[-1]} != manifest size {manifest.total_size}"
        )
    lead = vector.shape[:-1]
    parts: dict[tuple[int, str], dict[str, Tensor]] = {}
    for e in manifest.entries:
        piece = vector[..., e.offset : e.offset + e.size].reshape(*lead, *e.shape)
        parts.setdefault((e.layer, e.slot), {})[e.tensor] = piece
    return {key: AdapterTensors(**tensors) for key, tensors in parts.items()}


def pgn_generate(embedding: Tensor, theta: Tensor) -> Tensor:
    """Generate the flat adapter parameter vector: V = theta @ e.

    embedding: (d_ann,) or (B, d_ann); theta: (|V|, d_ann).
    """
    if embedding.shape[-1] != theta.shape[1]:
        raise ValueError(
            f"embedding dim {embedding.shape[-1]} != generator input dim {theta.shape[1]}"
        )
    return embedding @ theta.T


# ---------------------------------------------------------------------------
# Frozen transformer


class _FrozenLayer(nn.Module):
    """Post-norm transformer layer; adapters (when given) sit right after
    each sub-layer's output projection, inside the residual path."""

    def __init__(self, index: int, d_model: int, num_heads: int, d_ff: int):
        super().__init__()
        if d_model % num_heads:
            raise ValueError(f"d_model={d_model} not divisible by num_heads={num_heads}")
        self.index = index
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)

    def _attention(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        def heads(t: Tensor) -> Tensor:
            return t.view(b, n, self.num_heads, self.d_head).transpose(1, 2)
        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, n, d))

    def forward(self, x: Tensor, adapters: AdapterParams | None) -> Tensor:
        a = self._attention(x)
        if adapters is not None and (self.index, ATTN_SLOT) in adapters:
            a = adapter_forward(a, adapters[(self.index, ATTN_SLOT)])
        x = self.ln1(x + a)
        f = self.ff2(gelu(self.ff1(x)))
        if adapters is not None and (self.index, FFN_SLOT) in adapters:
            f = adapter_forward(f, adapters[(self.index, FFN_SLOT)])
        return self.ln2(x + f)


class FrozenEncoder(nn.Module):
    """Deterministically initialized transformer whose weights never train.

    All parameters are created with requires_grad=False from a seeded
    normal (sigma=0.02); layer norms start at identity.  The position table
    is scaled to the embedding sigma so token identity is not drowned out
    by the unit-scale sinusoids.
    """

    INIT_SIGMA = 0.02

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 64,
        num_layers: int = 2,
        num_heads: int = 2,
        d_ff: int = 128,
        max_len: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        self.d_model = d_model
        self.max_len = max_len
        self.token_emb = nn.Parameter(torch.empty(vocab_size, d_model))
        self.register_buffer(
            "positions", sinusoidal_positions(max_len, d_model) * self.INIT_SIGMA
        )
        self.layers = nn.ModuleList(
            _FrozenLayer(i, d_model, num_heads, d_ff) for i in range(num_layers)
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "ln" in name:
                    p.copy_(torch.ones_like(p) if name.endswith("weight") else torch.zeros_like(p))
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * self.INIT_SIGMA)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(self, token_ids: Tensor, adapters: AdapterParams | None = None) -> Tensor:
        """token_ids: (n,) or (B, n) -> hidden states (..., n, d_model)."""
        squeeze = token_ids.dim() == 1
        ids = token_ids.unsqueeze(0) if squeeze else token_ids
        n = ids.shape[1]
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max length {self.max_len}")
        x = self.token_emb[ids] + self.positions[:n].to(self.token_emb.dtype)
        for layer in self.layers:
            x = layer(x, adapters)
        return x.squeeze(0) if squeeze else x


def base_encode(token_ids: Tensor, frozen: FrozenEncoder) -> Tensor:
    """Adapter-free frozen forward pass."""
    return frozen(token_ids, adapters=None)
