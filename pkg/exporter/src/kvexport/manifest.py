"""Export manifest: what was captured, from where, and with which shapes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class ExportManifest:
    model: str
    layer_indices: list[int]
    span_start: int
    span_len: int                      # vision-token count n
    kv_heads: int
    head_dim: int
    capture: list[str] = field(default_factory=lambda: ["keys", "values"])
    sample_ids: list[str] = field(default_factory=list)
    # where tensors were taken from; the model's cache stores keys after
    # rotary embedding, so this is the post-rotary point
    capture_point: str = "post_rotary_cache"

    def validate(self, seq_len: int | None = None) -> None:
        if self.span_start < 0 or self.span_len < 1:
            raise ValueError(f"bad span ({self.span_start}, {self.span_len})")
        if seq_len is not None and self.span_start + self.span_len > seq_len:
            raise ValueError(
                f"span ({self.span_start}, {self.span_len}) exceeds sequence length {seq_len}"
            )
        if self.kv_heads < 1 or self.head_dim < 1:
            raise ValueError("kv_heads and head_dim must be >= 1")
        unknown = set(self.capture) - {"keys", "values", "attention_maps"}
        if unknown:
            raise ValueError(f"unknown capture targets {sorted(unknown)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExportManifest":
        return cls(**json.loads(text))
