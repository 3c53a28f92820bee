"""Training configuration with desk-scale defaults."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    dropout_p: float = 0.2
    clip_norm: float = 5.0
    epochs: int = 30
    seed: int = 0
    # network dimensions (desk scale)
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 2
    d_ff: int = 128
    max_len: int = 128
    d_adapter: int = 16
    d_ann: int = 8
    d_hidden: int = 64
    # None means adapt every layer
    num_adapted_layers: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p={self.dropout_p} outside [0,1)")
        for name in ("learning_rate", "batch_size", "clip_norm", "epochs",
                     "d_model", "num_layers", "num_heads", "d_ff", "max_len",
                     "d_adapter", "d_ann", "d_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def adapted_layers(self) -> int:
        return self.num_adapted_layers if self.num_adapted_layers is not None else self.num_layers

    @classmethod
    def paper_profile(cls, **overrides) -> "TrainConfig":
        """Reported full-scale hyperparameters (reference only; the full-scale
        pretrained encoder itself is out of scope): adapter width 128,
        annotator embedding size 8, LSTM hidden 400, batch 64, lr 1e-3,
        dropout 0.2, clip 5.0."""
        values = dict(d_adapter=128, d_ann=8, d_hidden=400)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))
