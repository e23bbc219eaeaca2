"""Diagnostics over KV dumps and attention maps.

All functions are pure and accept either synthetic fixtures or dumps parsed
from KVD1 files (see kvmodel.group_kv_entries). Head handling: statistics
are computed per KV head and averaged, since heads live in separate
geometric spaces; top-k attended sets use head-averaged maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError
from .keycodec import TrainConfig, compress_keys, reconstruct_keys, train_key_codec
from .valuecodec import compress_values, fit_value_pca, reconstruct_values

DEFAULT_ENERGY_LEVELS = (0.90, 0.95, 0.99)


@dataclass(frozen=True)
class FidelityMetrics:
    cosine: float
    mse: float

    def as_dict(self) -> dict[str, float]:
        return {"cosine": self.cosine, "mse": self.mse}


@dataclass(frozen=True)
class LayerRedundancy:
    layer: int
    key_cosine: float
    value_cosine: float
    excluded_rows: tuple[tuple[str, int, int], ...]   # (side, head, row)


@dataclass(frozen=True)
class LayerRanks:
    layer: int
    dims: int
    key_ranks: dict[float, float]     # energy level -> mean rank over heads
    value_ranks: dict[float, float]


def _as_heads(x, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim == 2:
        a = a[None, :, :]
    if a.ndim != 3:
        raise DimensionError(f"{what} must be (heads, tokens, d) or (tokens, d), got {a.shape}")
    return a


def _offdiag_mean(rows: np.ndarray) -> float:
    sim = kernels.pairwise_cosine(rows).astype(np.float64)
    n = sim.shape[0]
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))


def redundancy_stats(kv_dump) -> list[LayerRedundancy]:
    """Per-layer mean off-diagonal inter-token cosine for keys and values.

    kv_dump: mapping layer -> (keys, values), each (heads, n, d). Rows with
    (near-)zero norm are excluded from the statistic and reported.
    """
    out = []
    for layer in sorted(kv_dump):
        keys, values = kv_dump[layer]
        excluded: list[tuple[str, int, int]] = []
        stats = {}
        for side, tensor in (("K", keys), ("V", values)):
            t = _as_heads(tensor, f"layer {layer} {side}")
            if t.shape[1] < 2:
                raise ParameterError(f"layer {layer}: need >= 2 tokens, got {t.shape[1]}")
            head_means = []
            for h in range(t.shape[0]):
                norms = np.linalg.norm(t[h].astype(np.float64), axis=1)
                good = norms > kernels.DEGENERATE_NORM
                excluded.extend((side, h, int(r)) for r in np.nonzero(~good)[0])
                if good.sum() >= 2:
                    head_means.append(_offdiag_mean(t[h][good]))
            if not head_means:
                raise ParameterError(
                    f"layer {layer} {side}: fewer than 2 usable rows in every head"
                )
            stats[side] = float(np.mean(head_means))
        out.append(
            LayerRedundancy(
                layer=layer,
                key_cosine=stats["K"],
                value_cosine=stats["V"],
                excluded_rows=tuple(excluded),
            )
        )
    return out


def topk_overlap(attention_maps, fraction: float) -> np.ndarray:
    """Overlap of top-attended token sets between decode steps.

    attention_maps: (steps, n) head-averaged vision attention per step.
    Entry (i, j) = |Top(i) & Top(j)| / |Top(i)| with |Top| = ceil(fraction*n)
    and ties broken toward lower index.
    """
    maps = np.asarray(attention_maps, dtype=np.float64)
    if maps.ndim != 2 or maps.shape[0] < 2:
        raise ParameterError(f"need (steps >= 2, n) attention maps, got shape {maps.shape}")
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    steps, n = maps.shape
    top = math.ceil(fraction * n)
    sets = []
    for i in range(steps):
        order = np.argsort(-maps[i], kind="stable")
        sets.append(frozenset(order[:top].tolist()))
    out = np.empty((steps, steps))
    for i in range(steps):
        for j in range(steps):
            out[i, j] = len(sets[i] & sets[j]) / top
    return out


def _energy_ranks(x: np.ndarray, levels) -> dict[float, int]:
    """Smallest component count reaching each cumulative-energy level.

    x: (tokens, dims); columns are mean-centered over tokens before the
    spectrum is taken. An all-zero matrix has rank 0 at every level.
    """
    centered = x.astype(np.float64) - x.astype(np.float64).mean(axis=0, keepdims=True)
    m = min(centered.shape)
    _, sv = kernels.truncated_svd(centered.astype(np.float32), m)
    energy = sv.astype(np.float64) ** 2
    total = energy.sum()
    if total <= 0:
        return {float(lv): 0 for lv in levels}
    cum = np.cumsum(energy) / total
    out = {}
    for lv in levels:
        hit = np.nonzero(cum >= lv - 1e-12)[0]
        out[float(lv)] = int(hit[0]) + 1 if hit.size else m
    return out


def hidden_dim_rank(kv_dump, energy_levels=DEFAULT_ENERGY_LEVELS) -> list[LayerRanks]:
    """Feature-channel PCA ranks needed to preserve given variance levels.

    Computed per head from the token x feature matrix and averaged over
    heads, for keys and values separately.
    """
    if not kv_dump:
        raise ParameterError("empty KV dump")
    levels = tuple(float(lv) for lv in energy_levels)
    if any(not 0.0 < lv <= 1.0 for lv in levels):
        raise ParameterError(f"energy levels must lie in (0, 1], got {levels}")
    out = []
    for layer in sorted(kv_dump):
        keys, values = kv_dump[layer]
        ranks = {}
        dims = None
        for side, tensor in (("K", keys), ("V", values)):
            t = _as_heads(tensor, f"layer {layer} {side}")
            if t.shape[1] < 2:
                raise ParameterError(f"layer {layer}: need >= 2 tokens, got {t.shape[1]}")
            dims = t.shape[2]
            per_head = [_energy_ranks(t[h], levels) for h in range(t.shape[0])]
            ranks[side] = {
                lv: float(np.mean([r[lv] for r in per_head])) for lv in levels
            }
        out.append(
            LayerRanks(layer=layer, dims=dims, key_ranks=ranks["K"], value_ranks=ranks["V"])
        )
    return out


def attention_fidelity(p_ref, p_test) -> FidelityMetrics:
    """Cosine of the flattened attention-weight matrices plus elementwise MSE."""
    a = np.asarray(p_ref, dtype=np.float64).ravel()
    b = np.asarray(p_test, dtype=np.float64).ravel()
    if np.asarray(p_ref).shape != np.asarray(p_test).shape:
        raise DimensionError(
            f"attention maps differ in shape: {np.asarray(p_ref).shape} vs "
            f"{np.asarray(p_test).shape}"
        )
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= kernels.DEGENERATE_NORM or nb <= kernels.DEGENERATE_NORM:
        cosine = 1.0 if na <= kernels.DEGENERATE_NORM and nb <= kernels.DEGENERATE_NORM else 0.0
    else:
        cosine = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    mse = float(np.mean((a - b) ** 2))
    return FidelityMetrics(cosine=cosine, mse=mse)


# ---------------------------------------------------------------------------
# compression sweep


def key_codec_trainer(cfg: TrainConfig, kind: str = "linear"):
    """Sweep trainer that fits the learned key codec at each retention."""

    def trainer(train_samples, retention):
        codec, _ = train_key_codec(train_samples, retention, cfg, kind=kind)

        def reconstruct(sample):
            return reconstruct_keys(codec, compress_keys(codec, sample))

        return reconstruct

    return trainer


def value_codec_trainer(mean_policy: str = "per_sample"):
    """Sweep trainer that fits the value PCA at each retention."""

    def trainer(train_samples, retention):
        pca = fit_value_pca(train_samples, retention, mean_policy=mean_policy)

        def reconstruct(sample):
            comp, mu = compress_values(pca, sample)
            return reconstruct_values(pca, comp, mu)

        return reconstruct

    return trainer


@dataclass(frozen=True)
class SweepPoint:
    ratio: float        # compression ratio (fraction removed)
    retention: float
    cosine: float       # held-out mean per-token reconstruction cosine


def compression_sweep(samples, ratios, trainer) -> list[SweepPoint]:
    """Held-out reconstruction cosine at each compression ratio.

    samples: (S, heads, n, d) with S >= 2; the trailing max(1, S//5) samples
    are held out. ratios must lie in [0, 1); retention is 1 - ratio.
    """
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim == 3:
        data = data[:, None, :, :]
    if data.ndim != 4 or data.shape[0] < 2:
        raise ParameterError(f"samples must be (S >= 2, heads, n, d), got {data.shape}")
    ratios = [float(r) for r in ratios]
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ParameterError(f"compression ratios must lie in [0, 1), got {ratios}")
    n_hold = max(1, data.shape[0] // 5)
    train, held = data[:-n_hold], data[-n_hold:]

    points = []
    for ratio in ratios:
        reconstruct = trainer(train, 1.0 - ratio)
        cosines = []
        for s in range(held.shape[0]):
            rec = reconstruct(held[s])
            cosines.append(
                kernels.row_cosines(
                    held[s].reshape(-1, held.shape[-1]), np.asarray(rec).reshape(-1, held.shape[-1])
                )
            )
        points.append(
            SweepPoint(ratio=ratio, retention=1.0 - ratio, cosine=float(np.mean(cosines)))
        )
    return points
