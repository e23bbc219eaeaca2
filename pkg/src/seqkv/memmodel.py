"""Closed-form persistent-memory footprint model and break-even solver.

Per layer, the baseline stores 2 * B * H_kv * (c + k*n + t) * d_head * b_kv
bytes of KV; the compressed pipeline replaces each image's n vision tokens
with the retained length and adds fixed parameter overhead (value basis plus
key reconstructor, and the global mean when that policy is used). Per-sample
means live in the cache term instead. These formulas are kept byte-exact
against kvmodel's stored-byte counters for matching configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, ParameterError
from .pipeline import PyramidSchedule
from .retention import effective_len

PLANNING_KV_BYTES = 2   # deployment planning default; the engine stores f32 (4)


@dataclass(frozen=True)
class FootprintParams:
    schedule: PyramidSchedule
    batch: int = 1
    kv_heads: int = 4
    prompt_tokens: int = 0
    tokens_per_image: int = 196
    image_count: int = 1
    generated_tokens: int = 0
    head_dim: int = 128
    kv_bytes: int = PLANNING_KV_BYTES
    mean_policy: str = "per_sample"
    key_kind: str = "linear"
    hidden_width: int | None = None   # mlp2 reconstructor width; defaults to n

    def validate(self) -> None:
        if min(self.batch, self.kv_heads, self.head_dim, self.kv_bytes) < 1:
            raise ParameterError("batch, kv_heads, head_dim, kv_bytes must be >= 1")
        if min(self.prompt_tokens, self.image_count, self.generated_tokens) < 0:
            raise ParameterError("token counts must be >= 0")
        if self.image_count > 0 and self.tokens_per_image < 1:
            raise ParameterError("tokens_per_image must be >= 1 when images are present")
        if self.mean_policy not in ("per_sample", "global"):
            raise ParameterError(f"unknown mean policy {self.mean_policy!r}")
        if self.key_kind not in ("linear", "mlp2"):
            raise ParameterError(f"unknown key reconstructor kind {self.key_kind!r}")


@dataclass(frozen=True)
class FootprintReport:
    text_bytes: float
    vision_bytes: float
    mean_bytes: float
    generated_bytes: float
    overhead_basis_bytes: float
    overhead_key_bytes: float
    overhead_gmean_bytes: float

    @property
    def cache_bytes(self) -> float:
        return self.text_bytes + self.vision_bytes + self.mean_bytes + self.generated_bytes

    @property
    def overhead_bytes(self) -> float:
        return self.overhead_basis_bytes + self.overhead_key_bytes + self.overhead_gmean_bytes

    @property
    def total(self) -> float:
        return self.cache_bytes + self.overhead_bytes


def _key_param_count(p: FootprintParams, kk: int) -> int:
    n = p.tokens_per_image
    if p.key_kind == "linear":
        return n * kk
    hw = p.hidden_width if p.hidden_width is not None else n
    return hw * kk + hw + n * hw + n


def _footprint(p: FootprintParams, images: float, compressed: bool) -> FootprintReport:
    layers = p.schedule.layers
    per_tok = 2 * p.batch * p.kv_heads * p.head_dim * p.kv_bytes
    text = layers * per_tok * p.prompt_tokens
    gen = layers * per_tok * p.generated_tokens
    vision = mean = basis = key_w = gmean = 0.0
    for r in p.schedule.ratios:
        if not compressed:
            vision += per_tok * images * p.tokens_per_image
            continue
        kk = effective_len(r, p.tokens_per_image)
        vision += per_tok * images * kk
        if p.mean_policy == "per_sample":
            mean += p.batch * p.kv_heads * images * p.head_dim * p.kv_bytes
        else:
            gmean += p.kv_heads * p.head_dim * p.kv_bytes
        basis += p.kv_heads * kk * p.tokens_per_image * p.kv_bytes
        key_w += p.kv_heads * _key_param_count(p, kk) * p.kv_bytes
    return FootprintReport(
        text_bytes=text,
        vision_bytes=vision,
        mean_bytes=mean,
        generated_bytes=gen,
        overhead_basis_bytes=basis,
        overhead_key_bytes=key_w,
        overhead_gmean_bytes=gmean,
    )


def _to_int_report(rep: FootprintReport) -> FootprintReport:
    vals = {
        name: int(round(getattr(rep, name)))
        for name in (
            "text_bytes",
            "vision_bytes",
            "mean_bytes",
            "generated_bytes",
            "overhead_basis_bytes",
            "overhead_key_bytes",
            "overhead_gmean_bytes",
        )
    }
    return FootprintReport(**vals)


def footprint_base(p: FootprintParams) -> FootprintReport:
    """Full-cache persistent bytes (no codec, no overhead)."""
    p.validate()
    return _to_int_report(_footprint(p, float(p.image_count), compressed=False))


def footprint_ours(p: FootprintParams) -> FootprintReport:
    """Compressed-cache persistent bytes plus itemized parameter overhead."""
    p.validate()
    if p.image_count > 0 and p.schedule.layers < 1:
        raise ConfigurationError("schedule must cover at least one layer")
    return _to_int_report(_footprint(p, float(p.image_count), compressed=True))


def break_even(p_template: FootprintParams, vision_token_sweep) -> int | None:
    """First vision-token count where the compressed footprint wins, else None.

    The sweep is over total vision tokens N_v at fixed tokens-per-image n;
    fractional image counts interpolate linearly between integer counts.
    """
    p_template.validate()
    sweep = [int(v) for v in vision_token_sweep]
    if not sweep:
        raise ParameterError("vision-token sweep must be non-empty")
    if any(b <= a for a, b in zip(sweep, sweep[1:])):
        raise ParameterError("vision-token sweep must be strictly ascending")
    n = p_template.tokens_per_image
    for nv in sweep:
        images = nv / n
        base = _footprint(p_template, images, compressed=False).total
        ours = _footprint(p_template, images, compressed=True).total
        if ours < base:
            return nv
    return None


def sweep_table(p_template: FootprintParams, vision_token_sweep) -> list[dict[str, float]]:
    """Rows of (N_v, S_base, S_ours, savings) behind the break-even curve."""
    p_template.validate()
    rows = []
    n = p_template.tokens_per_image
    for nv in vision_token_sweep:
        images = float(nv) / n
        base = _footprint(p_template, images, compressed=False).total
        ours = _footprint(p_template, images, compressed=True).total
        rows.append(
            {
                "vision_tokens": float(nv),
                "base_bytes": base,
                "ours_bytes": ours,
                "savings_bytes": base - ours,
            }
        )
    return rows


def default_params() -> FootprintParams:
    """Documented planning default: 36 layers, retention ramp 0.75 -> 0.05."""
    from .pipeline import DEFAULT_R0, DEFAULT_R1, make_schedule

    return FootprintParams(schedule=make_schedule(36, DEFAULT_R0, DEFAULT_R1))


__all__ = [
    "FootprintParams",
    "FootprintReport",
    "footprint_base",
    "footprint_ours",
    "break_even",
    "sweep_table",
    "default_params",
    "PLANNING_KV_BYTES",
]
