"""Deterministic synthetic KV and query-trace generators.

Keys are built as a shared base direction plus rank-limited token mixing,
with the base/noise balance calibrated by bisection so the measured mean
inter-token cosine hits a target. Values get an independent base direction
plus a controlled singular spectrum (flat or decaying) so feature-space
density is tunable. Query traces sweep a Gaussian focus window across the
token axis at a configurable drift rate, which makes top-attended token
sets move between decode steps.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError
from .pipeline import QueryTrace

CAL_TOL = 0.05
CAL_ITERS = 50
_ALPHA_FLOOR = 0.05   # keeps the base direction present so key rank stays exact


@dataclass(frozen=True)
class SynthProfile:
    seed: int = 0
    n: int = 32
    d_head: int = 16
    kv_heads: int = 2
    layers: int = 2
    key_cosine: float | tuple[float, ...] = 0.8
    value_cosine: float | tuple[float, ...] = 0.3
    key_rank: int = 8
    value_spectrum: str = "flat"      # "flat" or "decaying"
    drift: float = 0.5

    def __post_init__(self):
        # keep the profile hashable when callers pass list targets
        for name in ("key_cosine", "value_cosine"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)):
                object.__setattr__(self, name, tuple(float(v) for v in value))

    def per_layer(self, value) -> tuple[float, ...]:
        if isinstance(value, (int, float)):
            return tuple(float(value) for _ in range(self.layers))
        vals = tuple(float(v) for v in value)
        if len(vals) != self.layers:
            raise ParameterError(f"per-layer target needs {self.layers} entries, got {len(vals)}")
        return vals

    def validate(self) -> None:
        if min(self.n, self.d_head, self.kv_heads, self.layers) < 1:
            raise ParameterError("n, d_head, kv_heads, layers must all be >= 1")
        if self.n < 2:
            raise ParameterError("need at least 2 tokens to define inter-token similarity")
        for t in self.per_layer(self.key_cosine) + self.per_layer(self.value_cosine):
            if not 0.0 <= t < 1.0:
                raise ParameterError(f"cosine target {t} outside [0, 1)")
        if not 1 <= self.key_rank <= self.n:
            raise ParameterError(f"key rank {self.key_rank} outside [1, {self.n}]")
        if self.key_rank < 2 and max(self.per_layer(self.key_cosine)) < 0.999:
            raise ParameterError("rank-1 keys are fully parallel; cosine target < 1 is infeasible")
        if self.value_spectrum not in ("flat", "decaying"):
            raise ParameterError(f"unknown value spectrum {self.value_spectrum!r}")
        if self.drift < 0:
            raise ParameterError("drift must be >= 0")


def _mean_offdiag_cosine(rows: np.ndarray) -> float:
    sim = kernels.pairwise_cosine(rows).astype(np.float64)
    n = sim.shape[0]
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))


def _calibrate_alpha(bases, noises, target: float) -> float:
    """Bisect the base-direction weight until the pooled mean cosine hits target."""

    def measure(alpha: float) -> float:
        vals = [
            _mean_offdiag_cosine(alpha * np.outer(np.ones(noise.shape[0]), base) + noise)
            for base, noise in zip(bases, noises)
        ]
        return float(np.mean(vals))

    lo, hi = _ALPHA_FLOOR, 1.0
    while measure(hi) < target and hi < 2**40:
        hi *= 2.0
    if measure(hi) < target:
        raise ParameterError(f"cosine target {target} is not reachable")
    if measure(lo) >= target:
        return lo
    for _ in range(CAL_ITERS):
        mid = 0.5 * (lo + hi)
        if measure(mid) < target:
            lo = mid
        else:
            hi = mid
        if abs(measure(hi) - target) <= CAL_TOL / 4:
            break
    return hi


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _key_noise(profile: SynthProfile, li: int, h: int, mix: np.ndarray, sample: int) -> np.ndarray:
    """Latent draw through the fixed per-head mixing; unit expected row norm."""
    rng = np.random.default_rng([profile.seed, li, h, 1, 1000 + sample])
    latent = rng.standard_normal((mix.shape[1], profile.d_head))
    return (mix @ latent) / np.sqrt(profile.d_head)


def _value_spread(profile: SynthProfile, li: int, h: int, sample: int) -> np.ndarray:
    rng = np.random.default_rng([profile.seed, li, h, 2, 1000 + sample])
    n, d = profile.n, profile.d_head
    m = min(n, d)
    if profile.value_spectrum == "flat":
        spec = np.ones(m)
    else:
        spec = 0.8 ** np.arange(m)
    p, _ = np.linalg.qr(rng.standard_normal((n, m)))
    qd, _ = np.linalg.qr(rng.standard_normal((d, m)))
    spread = p @ (spec[:, None] * qd.T)
    spread *= np.sqrt(n) / np.linalg.norm(spread)
    return spread


@dataclass(frozen=True)
class _LayerStructure:
    key_bases: tuple        # per head, unit (d,)
    key_mixes: tuple        # per head, (n, rank-1) with unit rows
    value_bases: tuple      # per head, unit (d,)
    key_alpha: float
    value_alpha: float


@functools.lru_cache(maxsize=128)
def _layer_structure(profile: SynthProfile, li: int) -> _LayerStructure:
    """Per-layer fixed structure: base directions, token mixing, calibrated
    base weights. The mixing matrix is shared across samples so a fixed
    sequence-axis reconstructor can recover every sample exactly; only the
    latent draws vary per sample. Cached: calibration bisection is the
    expensive part and is identical for every sample of a profile."""
    n, d, r = profile.n, profile.d_head, profile.key_rank
    kb, kmix, kn0, vb, vn0 = [], [], [], [], []
    for h in range(profile.kv_heads):
        srng = np.random.default_rng([profile.seed, li, h, 1])
        kb.append(_unit(srng.standard_normal(d)))
        if r >= 2:
            mix = srng.standard_normal((n, r - 1))
            mix /= np.linalg.norm(mix, axis=1, keepdims=True)
        else:
            mix = np.zeros((n, 0))
        kmix.append(mix)
        kn0.append(_key_noise(profile, li, h, mix, sample=0))
        vrng = np.random.default_rng([profile.seed, li, h, 2])
        vb.append(_unit(vrng.standard_normal(d)))
        vn0.append(_value_spread(profile, li, h, sample=0))

    key_target = profile.per_layer(profile.key_cosine)[li]
    value_target = profile.per_layer(profile.value_cosine)[li]
    ka = _calibrate_alpha(kb, kn0, key_target) if r >= 2 else 1.0
    va = _calibrate_alpha(vb, vn0, value_target)
    return _LayerStructure(
        key_bases=tuple(kb),
        key_mixes=tuple(kmix),
        value_bases=tuple(vb),
        key_alpha=ka,
        value_alpha=va,
    )


def gen_visual_kv(profile: SynthProfile, sample: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer, per-head key/value matrices, shape (layers, heads, n, d).

    Samples drawn from the same profile share each layer's base direction,
    token-mixing matrix, and calibrated base weight (calibration measures
    sample 0), so keys of every sample live in the same rank-limited token
    subspace and admit one exact linear reconstructor.
    """
    profile.validate()
    if sample < 0:
        raise ParameterError("sample index must be >= 0")
    n, d = profile.n, profile.d_head
    keys = np.empty((profile.layers, profile.kv_heads, n, d), dtype=np.float32)
    values = np.empty_like(keys)
    ones = np.ones(n)
    for li in range(profile.layers):
        st = _layer_structure(profile, li)
        for h in range(profile.kv_heads):
            noise = _key_noise(profile, li, h, st.key_mixes[h], sample)
            keys[li, h] = (
                st.key_alpha * np.outer(ones, st.key_bases[h]) + noise
            ).astype(np.float32)
            spread = _value_spread(profile, li, h, sample)
            values[li, h] = (
                st.value_alpha * np.outer(ones, st.value_bases[h]) + spread
            ).astype(np.float32)
    return keys, values


def gen_kv_dataset(profile: SynthProfile, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked samples, shape (count, layers, heads, n, d) for keys and values."""
    if count < 1:
        raise ParameterError("sample count must be >= 1")
    ks, vs = zip(*(gen_visual_kv(profile, sample=s) for s in range(count)))
    return np.stack(ks), np.stack(vs)


def gen_query_trace(
    profile: SynthProfile, steps: int, query_heads: int | None = None
) -> QueryTrace:
    """Per-step queries plus generated KV rows.

    Queries are Gaussian-window mixtures of the layer's key rows; the window
    center moves at the profile drift rate (drift 0 keeps queries fixed, so
    top-attended sets never change).
    """
    profile.validate()
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    hq = profile.kv_heads if query_heads is None else query_heads
    if hq < profile.kv_heads or hq % profile.kv_heads != 0:
        raise ParameterError("query_heads must be a positive multiple of kv_heads")

    keys, _ = gen_visual_kv(profile)
    n, d = profile.n, profile.d_head
    group = hq // profile.kv_heads
    width = max(1.0, 0.08 * n)
    idx = np.arange(n)

    # mixing mean-centered keys keeps the window signal from being drowned
    # out by the shared base direction; scale 4*sqrt(d) makes softmax peaky
    # enough that the top-attended set tracks the window
    queries = np.empty((steps, profile.layers, hq, d), dtype=np.float32)
    for t in range(steps):
        for li in range(profile.layers):
            centered = keys[li].astype(np.float64)
            centered = centered - centered.mean(axis=1, keepdims=True)
            for gq in range(hq):
                j = gq // group
                center = (profile.drift * t * n / 20.0 + 0.13 * n * gq) % n
                dist = np.minimum(np.abs(idx - center), n - np.abs(idx - center))
                w = np.exp(-0.5 * (dist / width) ** 2)
                q = w @ centered[j]
                if np.linalg.norm(q) <= 1e-12:
                    q = w @ keys[li, j].astype(np.float64)
                queries[t, li, gq] = (_unit(q) * 4.0 * np.sqrt(d)).astype(np.float32)

    rng = np.random.default_rng([profile.seed, 3])
    gen_k = rng.standard_normal((steps, profile.layers, profile.kv_heads, d)).astype(np.float32)
    gen_v = rng.standard_normal((steps, profile.layers, profile.kv_heads, d)).astype(np.float32)
    return QueryTrace(queries=queries, gen_k=gen_k, gen_v=gen_v)
