"""Prefill/decode over the segmented cache with four decode paths.

Paths:
  baseline_full       full cache, dense attention (the reference).
  reconstruct         expand compressed vision KV back to n tokens, then
                      attend (optionally only the key or value side,
                      for ablations).
  fused               score in compressed key space, expand scores with the
                      reconstructor transpose, joint softmax, then project
                      the probabilities into the compressed value space;
                      algebraically identical to `reconstruct` for linear
                      key codecs, but never materializes full-length KV.
  static_compressed   attend over the compressed rows directly (comparison
                      arm; no reconstruction beyond the stored mean).

The softmax is always joint across [text | vision | generated] logits so the
compressed paths are comparable to the baseline. Attention weights are
reported on the token-aligned axis for every path; the static path scatters
its retained-key weights into their original token slots.

Decode arithmetic runs in float64 on the float32-stored cache, so path
equivalences hold to tight tolerances; storage stays 32-bit throughout.

Traffic accounting (bytes per decode step, summed over layers): persistent
reads split into text/vision/mean/generated, codec parameter reads, and
transient materialization (score+probability rows, plus reconstructed KV on
the reconstruct path). Mask/page bookkeeping is not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    ParameterError,
    UnsupportedPathError,
)
from .keycodec import KeyCodec, reconstruct_keys
from .kvmodel import LayerCodec, ModelShape, SegmentedCache, VisionSegment, new_cache
from .retention import effective_len
from .valuecodec import ValuePca

PATHS = ("baseline_full", "reconstruct", "fused", "static_compressed")
ABLATIONS = ("both", "keys_only", "values_only")

DEFAULT_R0 = 0.75
DEFAULT_R1 = 0.05


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class PyramidSchedule:
    """Per-layer retention ratios, nonincreasing with depth."""

    ratios: tuple[float, ...]

    @property
    def layers(self) -> int:
        return len(self.ratios)

    @property
    def mean_retention(self) -> float:
        return float(np.mean(self.ratios))

    def effective_lengths(self, n: int) -> list[int]:
        return [effective_len(r, n) for r in self.ratios]

    def mean_effective_retention(self, n: int) -> float:
        return sum(self.effective_lengths(n)) / (self.layers * n)


def make_schedule(layers: int, r0: float, r1: float) -> PyramidSchedule:
    """Linear retention ramp from r0 (first layer) down to r1 (last layer)."""
    if layers < 1:
        raise ParameterError(f"layer count must be >= 1, got {layers}")
    if not (0.0 < r1 <= r0 <= 1.0):
        raise ParameterError(f"need 0 < r1 <= r0 <= 1, got r0={r0}, r1={r1}")
    if layers == 1:
        return PyramidSchedule(ratios=(float(r0),))
    # convex form hits r0 and r1 exactly at the endpoints
    ratios = tuple(
        r0 * (1.0 - li / (layers - 1)) + r1 * (li / (layers - 1)) for li in range(layers)
    )
    return PyramidSchedule(ratios=ratios)


# ---------------------------------------------------------------------------
# decode configuration and reports


@dataclass(frozen=True)
class DecodeConfig:
    path: str = "baseline_full"
    ablation: str = "both"
    sigma: float | None = None   # None -> 1/sqrt(d_head)

    def validate(self) -> None:
        if self.path not in PATHS:
            raise ParameterError(f"unknown decode path {self.path!r}")
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"unknown ablation mode {self.ablation!r}")


@dataclass
class TrafficReport:
    text_bytes: int = 0
    vision_bytes: int = 0
    mean_bytes: int = 0
    generated_bytes: int = 0
    codec_bytes: int = 0
    temp_bytes: int = 0

    @property
    def persistent_bytes(self) -> int:
        return self.text_bytes + self.vision_bytes + self.mean_bytes + self.generated_bytes

    def merge(self, other: "TrafficReport") -> None:
        self.text_bytes += other.text_bytes
        self.vision_bytes += other.vision_bytes
        self.mean_bytes += other.mean_bytes
        self.generated_bytes += other.generated_bytes
        self.codec_bytes += other.codec_bytes
        self.temp_bytes += other.temp_bytes

    def as_dict(self) -> dict[str, int]:
        return {
            "text_bytes": self.text_bytes,
            "vision_bytes": self.vision_bytes,
            "mean_bytes": self.mean_bytes,
            "generated_bytes": self.generated_bytes,
            "codec_bytes": self.codec_bytes,
            "temp_bytes": self.temp_bytes,
        }


@dataclass(frozen=True)
class SequenceLayout:
    """Token-aligned axis layout shared by the reported attention weights."""

    text_len: int
    vision_spans: tuple[tuple[int, int], ...]   # (start, length) per segment
    gen_len: int

    @property
    def total(self) -> int:
        return self.text_len + sum(n for _, n in self.vision_spans) + self.gen_len

    @property
    def vision_slice(self) -> slice:
        width = sum(n for _, n in self.vision_spans)
        return slice(self.text_len, self.text_len + width)


@dataclass
class DecodeResult:
    outputs: np.ndarray            # (layers, query_heads, d_head) float32
    weights: list[np.ndarray]      # per layer (query_heads, layout.total) float32
    layout: SequenceLayout
    traffic: TrafficReport

    def vision_attention(self, layer: int | None = None) -> np.ndarray:
        """Head-averaged conditional attention over vision token columns.

        Each head's vision block is renormalized to sum 1 before averaging,
        so the measurement is independent of how much probability mass the
        text and generated segments absorb. Layer-averaged when layer is
        None.
        """
        sl = self.layout.vision_slice
        per_layer = []
        for w in self.weights:
            block = w[:, sl].astype(np.float64)
            sums = block.sum(axis=1, keepdims=True)
            sums[sums <= 0] = 1.0
            per_layer.append((block / sums).mean(axis=0))
        if layer is not None:
            return per_layer[layer]
        return np.mean(per_layer, axis=0)


# ---------------------------------------------------------------------------
# prefill


def prefill_compressed(
    shape: ModelShape,
    text_kv,
    vision_kv,
    schedule: PyramidSchedule,
    codecs,
    ablation: str = "both",
) -> SegmentedCache:
    """Build the compressed cache: vision keys row-selected, values projected.

    Ablation modes leave one side stored at full length.
    """
    if ablation not in ABLATIONS:
        raise ParameterError(f"unknown ablation mode {ablation!r}")
    return new_cache(
        shape,
        text_kv,
        vision_kv,
        schedule,
        codecs,
        mode="compressed",
        compress_keys=ablation in ("both", "keys_only"),
        compress_values=ablation in ("both", "values_only"),
    )


# ---------------------------------------------------------------------------
# shared decode helpers


def _check_queries(q, shape: ModelShape) -> np.ndarray:
    a = np.asarray(q, dtype=np.float64)
    if a.ndim == 2:
        a = np.tile(a[None], (shape.layers, 1, 1))
    if a.shape != (shape.layers, shape.query_heads, shape.head_dim):
        raise DimensionError(
            f"queries must have shape ({shape.layers}, {shape.query_heads}, "
            f"{shape.head_dim}), got {np.asarray(q).shape}"
        )
    return a


def _sigma(shape: ModelShape, sigma: float | None) -> float:
    return 1.0 / np.sqrt(shape.head_dim) if sigma is None else float(sigma)


def _rep(a: np.ndarray, group: int) -> np.ndarray:
    """Repeat the KV-head axis so each query head sees its group's tensor."""
    return np.repeat(a, group, axis=0)


def _softmax_rows64(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 0:
        raise DimensionError("cannot attend over an empty sequence")
    x = logits - logits.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=1, keepdims=True)
    return x


def _layout_of(cache: SegmentedCache) -> SequenceLayout:
    """Token layout shared by all layers; rejects ragged caches.

    A transformer appends every generated token's KV to every layer, and the
    vision/text spans are input properties, so per-layer disagreement means
    the driver misused append_token_kv."""
    first = cache.layers[0]
    signature = (
        first.text_k.shape[1],
        tuple(seg.full_len for seg in first.vision),
        first.gen_len,
    )
    for li, lc in enumerate(cache.layers[1:], start=1):
        other = (
            lc.text_k.shape[1],
            tuple(seg.full_len for seg in lc.vision),
            lc.gen_len,
        )
        if other != signature:
            raise ConfigurationError(
                f"layer {li} segment lengths {other} disagree with layer 0 {signature}"
            )
    spans = []
    pos = first.text_k.shape[1]
    for seg in first.vision:
        spans.append((pos, seg.full_len))
        pos += seg.full_len
    return SequenceLayout(
        text_len=first.text_k.shape[1], vision_spans=tuple(spans), gen_len=first.gen_len
    )


def _persistent_reads(cache: SegmentedCache, traffic: TrafficReport) -> None:
    b = cache.shape.kv_bytes
    for lc in cache.layers:
        traffic.text_bytes += (lc.text_k.size + lc.text_v.size) * b
        traffic.generated_bytes += sum(r.size * b for r in lc.gen_k)
        traffic.generated_bytes += sum(r.size * b for r in lc.gen_v)
        for seg in lc.vision:
            traffic.vision_bytes += (seg.keys.size + seg.values.size) * b
            if seg.mean is not None:
                traffic.mean_bytes += seg.mean.size * b


def _segment_mean(seg: VisionSegment, codec: LayerCodec | None) -> np.ndarray:
    if seg.mean is not None:
        return seg.mean.astype(np.float64)
    if codec is not None and codec.value.global_mean is not None:
        return codec.value.global_mean.astype(np.float64)
    raise ConfigurationError("compressed values need a per-sample or global mean")


# ---------------------------------------------------------------------------
# decode paths


def decode_step_baseline(cache: SegmentedCache, q, sigma: float | None = None) -> DecodeResult:
    """Dense attention over the full cache (reference path)."""
    shape = cache.shape
    if cache.mode != "full":
        raise ConfigurationError("baseline path needs a full (uncompressed) cache")
    qs = _check_queries(q, shape)
    sg = _sigma(shape, sigma)
    g = shape.group_size
    traffic = TrafficReport()
    _persistent_reads(cache, traffic)
    layout = _layout_of(cache)

    outputs = np.empty((shape.layers, shape.query_heads, shape.head_dim), dtype=np.float32)
    weights = []
    for li, lc in enumerate(cache.layers):
        gk, gv = lc.gen_arrays(shape.kv_heads, shape.head_dim)
        keys = np.concatenate([lc.text_k] + [s.keys for s in lc.vision] + [gk], axis=1)
        vals = np.concatenate([lc.text_v] + [s.values for s in lc.vision] + [gv], axis=1)
        k_rep = _rep(keys.astype(np.float64), g)
        v_rep = _rep(vals.astype(np.float64), g)
        logits = np.einsum("gd,gmd->gm", qs[li], k_rep) * sg
        probs = _softmax_rows64(logits)
        outputs[li] = np.einsum("gm,gmd->gd", probs, v_rep).astype(np.float32)
        weights.append(probs.astype(np.float32))
        traffic.temp_bytes += 2 * probs.size * shape.kv_bytes
    return DecodeResult(outputs=outputs, weights=weights, layout=layout, traffic=traffic)


def _check_ablation_cache(cache: SegmentedCache, ablation: str) -> None:
    for li, lc in enumerate(cache.layers):
        for seg in lc.vision:
            if ablation == "keys_only" and seg.values_compressed:
                raise ConfigurationError(
                    f"layer {li}: keys_only ablation needs uncompressed stored values"
                )
            if ablation == "values_only" and seg.keys_compressed:
                raise ConfigurationError(
                    f"layer {li}: values_only ablation needs uncompressed stored keys"
                )
            if ablation in ("keys_only", "both") and not seg.keys_compressed:
                raise ConfigurationError(f"layer {li}: vision keys are not compressed")
            if ablation in ("values_only", "both") and not seg.values_compressed:
                raise ConfigurationError(f"layer {li}: vision values are not compressed")


def decode_step_reconstruct(
    cache: SegmentedCache,
    q,
    codecs,
    ablation: str = "both",
    sigma: float | None = None,
) -> DecodeResult:
    """Expand compressed vision KV to full length, then dense attention."""
    shape = cache.shape
    if cache.mode != "compressed":
        raise ConfigurationError("reconstruct path needs a compressed cache")
    if ablation not in ABLATIONS:
        raise ParameterError(f"unknown ablation mode {ablation!r}")
    if codecs is None or len(codecs) != shape.layers:
        raise ConfigurationError("reconstruct path needs one codec per layer")
    _check_ablation_cache(cache, ablation)

    qs = _check_queries(q, shape)
    sg = _sigma(shape, sigma)
    g = shape.group_size
    b = shape.kv_bytes
    traffic = TrafficReport()
    _persistent_reads(cache, traffic)
    layout = _layout_of(cache)

    outputs = np.empty((shape.layers, shape.query_heads, shape.head_dim), dtype=np.float32)
    weights = []
    for li, lc in enumerate(cache.layers):
        codec = codecs[li]
        key_w_bytes = sum(w.size for w in codec.key.weights.values()) * b
        basis_bytes = codec.value.basis.size * b
        gmean_bytes = (
            codec.value.global_mean.size * b if codec.value.global_mean is not None else 0
        )
        k_parts = [lc.text_k.astype(np.float64)]
        v_parts = [lc.text_v.astype(np.float64)]
        for seg in lc.vision:
            if seg.keys_compressed:
                khat = reconstruct_keys(codec.key, seg.keys).astype(np.float64)
                traffic.codec_bytes += key_w_bytes
                traffic.temp_bytes += khat.size * b
            else:
                khat = seg.keys.astype(np.float64)
            if seg.values_compressed:
                mu = _segment_mean(seg, codec)
                u = codec.value.basis.astype(np.float64)
                vhat = np.einsum("hkn,hkd->hnd", u, seg.values.astype(np.float64))
                vhat += mu[:, None, :]
                traffic.codec_bytes += basis_bytes + gmean_bytes
                traffic.temp_bytes += vhat.size * b
            else:
                vhat = seg.values.astype(np.float64)
            k_parts.append(khat)
            v_parts.append(vhat)
        gk, gv = lc.gen_arrays(shape.kv_heads, shape.head_dim)
        k_parts.append(gk.astype(np.float64))
        v_parts.append(gv.astype(np.float64))

        keys = np.concatenate(k_parts, axis=1)
        vals = np.concatenate(v_parts, axis=1)
        logits = np.einsum("gd,gmd->gm", qs[li], _rep(keys, g)) * sg
        probs = _softmax_rows64(logits)
        outputs[li] = np.einsum("gm,gmd->gd", probs, _rep(vals, g)).astype(np.float32)
        weights.append(probs.astype(np.float32))
        traffic.temp_bytes += 2 * probs.size * b
    return DecodeResult(outputs=outputs, weights=weights, layout=layout, traffic=traffic)


def decode_step_fused(
    cache: SegmentedCache,
    q,
    codecs,
    sigma: float | None = None,
) -> DecodeResult:
    """Score in compressed key space, expand scores, joint softmax, then
    project probabilities into the compressed value space.

    Requires a linear key codec and fully compressed vision segments; output
    matches decode_step_reconstruct while reading only compressed vision KV.
    """
    shape = cache.shape
    if cache.mode != "compressed":
        raise ConfigurationError("fused path needs a compressed cache")
    if codecs is None or len(codecs) != shape.layers:
        raise ConfigurationError("fused path needs one codec per layer")
    for codec in codecs:
        if codec.key.kind != "linear":
            raise UnsupportedPathError(
                "fused path requires a linear key codec; score expansion through an "
                "MLP is not a matrix transpose"
            )
    for li, lc in enumerate(cache.layers):
        for seg in lc.vision:
            if not (seg.keys_compressed and seg.values_compressed):
                raise ConfigurationError(
                    f"layer {li}: fused path needs fully compressed vision segments"
                )

    qs = _check_queries(q, shape)
    sg = _sigma(shape, sigma)
    g = shape.group_size
    b = shape.kv_bytes
    traffic = TrafficReport()
    _persistent_reads(cache, traffic)
    layout = _layout_of(cache)

    outputs = np.empty((shape.layers, shape.query_heads, shape.head_dim), dtype=np.float32)
    weights = []
    for li, lc in enumerate(cache.layers):
        codec = codecs[li]
        w = codec.key.weights["w"].astype(np.float64)          # (H, n, k)
        u = codec.value.basis.astype(np.float64)               # (H, k, n)
        traffic.codec_bytes += (codec.key.weights["w"].size + codec.value.basis.size) * b
        if codec.value.global_mean is not None:
            traffic.codec_bytes += codec.value.global_mean.size * b

        text_logits = (
            np.einsum("gd,gmd->gm", qs[li], _rep(lc.text_k.astype(np.float64), g)) * sg
        )
        blocks = [text_logits]
        seg_data = []
        for seg in lc.vision:
            s_comp = (
                np.einsum("gd,gkd->gk", qs[li], _rep(seg.keys.astype(np.float64), g)) * sg
            )
            # expand compressed scores to token resolution via the
            # reconstructor transpose: (q K~^T) W^T == q (W K~)^T
            l_img = np.einsum("gk,gnk->gn", s_comp, _rep(w, g))
            blocks.append(l_img)
            seg_data.append(seg)
        gk, gv = lc.gen_arrays(shape.kv_heads, shape.head_dim)
        gen_logits = np.einsum("gd,gmd->gm", qs[li], _rep(gk.astype(np.float64), g)) * sg
        blocks.append(gen_logits)

        probs = _softmax_rows64(np.concatenate(blocks, axis=1))
        weights.append(probs.astype(np.float32))
        traffic.temp_bytes += 2 * probs.size * b

        out = np.einsum(
            "gm,gmd->gd", probs[:, : layout.text_len], _rep(lc.text_v.astype(np.float64), g)
        )
        pos = layout.text_len
        for seg in seg_data:
            p_seg = probs[:, pos : pos + seg.full_len]
            pos += seg.full_len
            coeff = np.einsum("gn,gkn->gk", p_seg, _rep(u, g))
            out += np.einsum("gk,gkd->gd", coeff, _rep(seg.values.astype(np.float64), g))
            mu = _segment_mean(seg, codec)
            out += p_seg.sum(axis=1)[:, None] * _rep(mu, g)
        if layout.gen_len:
            out += np.einsum("gm,gmd->gd", probs[:, pos:], _rep(gv.astype(np.float64), g))
        outputs[li] = out.astype(np.float32)
    return DecodeResult(outputs=outputs, weights=weights, layout=layout, traffic=traffic)


def decode_step_static(cache: SegmentedCache, q, sigma: float | None = None) -> DecodeResult:
    """Attend over the compressed rows directly (no reconstruction).

    The stored mean is still added back for compressed values, but scores
    are computed against retained keys only, and compressed value rows are
    used as-is. Reported weights scatter the retained-key probabilities into
    their original token slots so results stay comparable to other paths.
    """
    shape = cache.shape
    if cache.mode != "compressed":
        raise ConfigurationError("static path needs a compressed cache")
    for li, lc in enumerate(cache.layers):
        for seg in lc.vision:
            if seg.keys_compressed != seg.values_compressed:
                raise ConfigurationError(
                    f"layer {li}: static path needs both sides compressed (or neither)"
                )
            if seg.keys_compressed and seg.token_indices is None:
                raise ConfigurationError(f"layer {li}: compressed segment lacks token indices")

    qs = _check_queries(q, shape)
    sg = _sigma(shape, sigma)
    g = shape.group_size
    b = shape.kv_bytes
    traffic = TrafficReport()
    _persistent_reads(cache, traffic)
    layout = _layout_of(cache)

    outputs = np.empty((shape.layers, shape.query_heads, shape.head_dim), dtype=np.float32)
    weights = []
    for li, lc in enumerate(cache.layers):
        keys = np.concatenate(
            [lc.text_k] + [s.keys for s in lc.vision] + [lc.gen_arrays(shape.kv_heads, shape.head_dim)[0]],
            axis=1,
        ).astype(np.float64)
        logits = np.einsum("gd,gmd->gm", qs[li], _rep(keys, g)) * sg
        probs = _softmax_rows64(logits)
        traffic.temp_bytes += 2 * probs.size * b

        gk, gv = lc.gen_arrays(shape.kv_heads, shape.head_dim)
        out = np.einsum(
            "gm,gmd->gd",
            probs[:, : layout.text_len],
            _rep(lc.text_v.astype(np.float64), g),
        )
        full = np.zeros((shape.query_heads, layout.total))
        full[:, : layout.text_len] = probs[:, : layout.text_len]
        pos = layout.text_len          # compressed-axis cursor
        tok = layout.text_len          # token-aligned cursor
        for seg in lc.vision:
            rows = seg.keys.shape[1]
            p_seg = probs[:, pos : pos + rows]
            pos += rows
            out += np.einsum("gm,gmd->gd", p_seg, _rep(seg.values.astype(np.float64), g))
            if seg.values_compressed:
                if seg.mean is None:
                    raise ConfigurationError(
                        "static path needs per-sample means stored in the cache"
                    )
                out += p_seg.sum(axis=1)[:, None] * _rep(seg.mean.astype(np.float64), g)
            if seg.keys_compressed:
                full[:, tok + np.asarray(seg.token_indices)] = p_seg
            else:
                full[:, tok : tok + rows] = p_seg
            tok += seg.full_len
        if layout.gen_len:
            p_gen = probs[:, pos:]
            out += np.einsum("gm,gmd->gd", p_gen, _rep(gv.astype(np.float64), g))
            full[:, tok:] = p_gen
        outputs[li] = out.astype(np.float32)
        weights.append(full.astype(np.float32))
    return DecodeResult(outputs=outputs, weights=weights, layout=layout, traffic=traffic)


# ---------------------------------------------------------------------------
# multi-step generation


@dataclass(frozen=True)
class QueryTrace:
    """Externally supplied decode drive: no language model is involved."""

    queries: np.ndarray   # (steps, layers, query_heads, d_head)
    gen_k: np.ndarray     # (steps, layers, kv_heads, d_head)
    gen_v: np.ndarray

    @property
    def steps(self) -> int:
        return self.queries.shape[0]

    def validate(self, shape: ModelShape) -> None:
        q_expect = (self.steps, shape.layers, shape.query_heads, shape.head_dim)
        kv_expect = (self.steps, shape.layers, shape.kv_heads, shape.head_dim)
        if self.queries.shape != q_expect:
            raise DimensionError(f"trace queries {self.queries.shape} != {q_expect}")
        if self.gen_k.shape != kv_expect or self.gen_v.shape != kv_expect:
            raise DimensionError(f"trace generated KV must have shape {kv_expect}")


@dataclass
class GenerationResult:
    outputs: np.ndarray                 # (steps, layers, query_heads, d_head)
    step_weights: list[list[np.ndarray]]
    layouts: list[SequenceLayout]
    reports: list[TrafficReport]

    def total_traffic(self) -> TrafficReport:
        total = TrafficReport()
        for r in self.reports:
            total.merge(r)
        return total

    def step_vision_attention(self, step: int) -> np.ndarray:
        """Layer- and head-averaged conditional vision attention at one step."""
        res = DecodeResult(
            outputs=self.outputs[step],
            weights=self.step_weights[step],
            layout=self.layouts[step],
            traffic=self.reports[step],
        )
        return res.vision_attention()


def run_generation(
    cache: SegmentedCache,
    trace: QueryTrace,
    codecs,
    cfg: DecodeConfig,
) -> GenerationResult:
    """Decode each trace step with the configured path, appending generated KV.

    The step-s query attends over everything generated before step s; its
    own KV rows are appended afterwards.
    """
    from .kvmodel import append_token_kv

    cfg.validate()
    trace.validate(cache.shape)
    outputs = np.empty(
        (trace.steps, cache.shape.layers, cache.shape.query_heads, cache.shape.head_dim),
        dtype=np.float32,
    )
    step_weights, layouts, reports = [], [], []
    for t in range(trace.steps):
        if cfg.path == "baseline_full":
            res = decode_step_baseline(cache, trace.queries[t], sigma=cfg.sigma)
        elif cfg.path == "reconstruct":
            res = decode_step_reconstruct(
                cache, trace.queries[t], codecs, ablation=cfg.ablation, sigma=cfg.sigma
            )
        elif cfg.path == "fused":
            res = decode_step_fused(cache, trace.queries[t], codecs, sigma=cfg.sigma)
        else:
            res = decode_step_static(cache, trace.queries[t], sigma=cfg.sigma)
        outputs[t] = res.outputs
        step_weights.append(res.weights)
        layouts.append(res.layout)
        reports.append(res.traffic)
        for li in range(cache.shape.layers):
            append_token_kv(cache, li, trace.gen_k[t, li], trace.gen_v[t, li])
    return GenerationResult(
        outputs=outputs, step_weights=step_weights, layouts=layouts, reports=reports
    )


# ---------------------------------------------------------------------------
# identity codecs (retention 1, exact round trip)


def make_identity_codecs(
    layers: int, heads: int, n: int, mean_policy: str = "per_sample", d_head: int | None = None
) -> list[LayerCodec]:
    """Codecs with full retention whose round trip is exact: mask keeps all
    rows, the key reconstructor is the identity, and the value basis is the
    identity (so even the static path reproduces the baseline)."""
    eye = np.tile(np.eye(n, dtype=np.float32), (heads, 1, 1))
    mask = np.arange(n, dtype=np.int64)
    out = []
    for _ in range(layers):
        key = KeyCodec(mask=mask.copy(), kind="linear", weights={"w": eye.copy()}, n=n)
        if mean_policy == "global":
            if d_head is None:
                raise ParameterError("global mean policy needs d_head")
            gmean = np.zeros((heads, d_head), dtype=np.float32)
        else:
            gmean = None
        value = ValuePca(basis=eye.copy(), mean_policy=mean_policy, global_mean=gmean)
        out.append(LayerCodec(key=key, value=value, retention=1.0))
    return out
