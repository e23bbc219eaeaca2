"""Learned selective retention for visual keys.

The codec keeps a per-layer token mask (shared across KV heads) and a
per-head reconstructor that maps the retained rows back to the full token
length. Mask logits and reconstructor weights are trained jointly: a soft
sigmoid-mask phase with annealed temperature, then a hard top-k phase with
straight-through gradients. The optimizer is plain full-batch gradient
descent with global gradient-norm clipping, so runs are bit-reproducible
for a given seed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError, TrainingError
from .retention import effective_len

KINDS = ("linear", "mlp2")

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class KeyCodec:
    """Trained key compressor for one layer."""

    mask: np.ndarray               # (k,) int64, strictly increasing indices in [0, n)
    kind: str                      # "linear" or "mlp2"
    weights: dict[str, np.ndarray]  # linear: w (heads, n, k); mlp2: w1/b1/w2/b2
    n: int

    @property
    def k(self) -> int:
        return self.mask.shape[0]

    @property
    def heads(self) -> int:
        key = "w" if self.kind == "linear" else "w1"
        return self.weights[key].shape[0]

    def validate(self) -> None:
        m = self.mask
        if m.ndim != 1 or m.size == 0:
            raise ParameterError("mask must be a non-empty index vector")
        if m[0] < 0 or m[-1] >= self.n or np.any(np.diff(m) <= 0):
            raise ParameterError(f"mask must be strictly increasing within [0, {self.n})")
        if self.kind == "linear":
            w = self.weights["w"]
            if w.shape[1:] != (self.n, self.k):
                raise ParameterError(f"linear weights must be (heads, {self.n}, {self.k})")
        elif self.kind == "mlp2":
            w1, b1 = self.weights["w1"], self.weights["b1"]
            w2, b2 = self.weights["w2"], self.weights["b2"]
            hidden = w1.shape[1]
            if hidden < self.k:
                raise ParameterError(f"mlp2 hidden width {hidden} below retained length {self.k}")
            ok = (
                w1.shape[1:] == (hidden, self.k)
                and b1.shape[1:] == (hidden,)
                and w2.shape[1:] == (self.n, hidden)
                and b2.shape[1:] == (self.n,)
            )
            if not ok:
                raise ParameterError("mlp2 weight shapes are inconsistent")
        else:
            raise ParameterError(f"unknown reconstructor kind {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float | None = None   # None: auto-scaled from data curvature
    mask_weight: float = 1.0     # weight of the retention loss
    tau_start: float = 1.0
    tau_end: float = 0.1
    soft_fraction: float = 0.5   # leading fraction of epochs run with soft masks
    seed: int = 0
    hidden_width: int | None = None  # mlp2 only; defaults to n
    clip_norm: float = 1.0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.mask_weight < 0:
            raise ParameterError("mask_weight must be >= 0")
        if not (0 < self.tau_end <= self.tau_start):
            raise ParameterError("temperatures must satisfy 0 < tau_end <= tau_start")
        if not (0.0 <= self.soft_fraction <= 1.0):
            raise ParameterError("soft_fraction must lie in [0, 1]")
        if self.clip_norm <= 0:
            raise ParameterError("clip_norm must be positive")


@dataclass
class EpochStats:
    epoch: int
    phase: str
    tau: float
    train_mse: float
    val_mse: float
    val_cosine: float
    mask_mean: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    val_mse: float = float("nan")
    val_cosine: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_mse,val_mse,val_cosine,mask_mean\n")
        for row in self.epochs:
            buf.write(
                f"{row.epoch},{row.train_mse:.8e},{row.val_mse:.8e},"
                f"{row.val_cosine:.6f},{row.mask_mean:.6f}\n"
            )
        return buf.getvalue()


def hard_mask_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties broken toward lower index, sorted."""
    order = np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def get_mask(logits, tau: float, retention: float, phase: str) -> np.ndarray:
    """Mask vector over tokens: sigmoid weights (soft) or a top-k indicator (hard)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("logits must be a vector with one entry per token")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    k = effective_len(retention, z.shape[0])
    if phase == "soft":
        return _sigmoid(z / tau)
    if phase == "hard":
        m = np.zeros_like(z)
        m[hard_mask_indices(z, k)] = 1.0
        return m
    raise ParameterError(f"unknown phase {phase!r}")


def mask_loss(mean_activation: float, retention: float) -> float:
    """Retention penalty: binary KL(retention || activation) plus a quadratic term.

    Zero exactly when the mean soft activation equals the target retention,
    positive and differentiable otherwise.
    """
    p = min(max(float(mean_activation), 1e-12), 1.0 - 1e-12)
    t = float(retention)
    kl = 0.0
    if t > 0:
        kl += t * math.log(t / p)
    if t < 1:
        kl += (1.0 - t) * math.log((1.0 - t) / (1.0 - p))
    return kl + (p - t) ** 2


def _mask_loss_grad(mean_activation: float, retention: float) -> float:
    p = min(max(float(mean_activation), 1e-12), 1.0 - 1e-12)
    t = float(retention)
    return -t / p + (1.0 - t) / (1.0 - p) + 2.0 * (p - t)


def _forward(kind: str, params: dict, mask_vec: np.ndarray, keys: np.ndarray):
    """Reconstruct keys from mask-weighted inputs; returns (khat, backprop cache)."""
    km = keys * mask_vec[None, None, :, None]
    if kind == "linear":
        khat = np.einsum("hij,shjd->shid", params["w"], km)
        return khat, (km,)
    h = np.einsum("hij,shjd->shid", params["w1"], km) + params["b1"][None, :, :, None]
    a = _gelu(h)
    khat = np.einsum("hij,shjd->shid", params["w2"], a) + params["b2"][None, :, :, None]
    return khat, (km, h, a)


def reconstruction_loss(kind: str, params: dict, mask_vec, keys) -> float:
    """Mean squared reconstruction error over all samples/heads/tokens/features."""
    keys = np.asarray(keys, dtype=np.float64)
    mask_vec = np.asarray(mask_vec, dtype=np.float64)
    khat, _ = _forward(kind, params, mask_vec, keys)
    return float(np.mean((khat - keys) ** 2))


def reconstruction_loss_and_grads(kind: str, params: dict, mask_vec, keys):
    """MSE plus analytic gradients w.r.t. reconstructor params and mask values.

    keys: (samples, heads, n, d) float64. Returns (mse, grads, dmask) where
    grads mirrors the params dict and dmask has one entry per token.
    """
    keys = np.asarray(keys, dtype=np.float64)
    mask_vec = np.asarray(mask_vec, dtype=np.float64)
    khat, cache = _forward(kind, params, mask_vec, keys)
    err = khat - keys
    mse = float(np.mean(err**2))
    dkhat = (2.0 / err.size) * err

    grads: dict[str, np.ndarray] = {}
    if kind == "linear":
        (km,) = cache
        grads["w"] = np.einsum("shid,shjd->hij", dkhat, km)
        dkm = np.einsum("hij,shid->shjd", params["w"], dkhat)
    else:
        km, h, a = cache
        grads["w2"] = np.einsum("shid,shjd->hij", dkhat, a)
        grads["b2"] = np.einsum("shid->hi", dkhat)
        da = np.einsum("hij,shid->shjd", params["w2"], dkhat)
        dh = da * _gelu_grad(h)
        grads["w1"] = np.einsum("shid,shjd->hij", dh, km)
        grads["b1"] = np.einsum("shid->hi", dh)
        dkm = np.einsum("hij,shid->shjd", params["w1"], dh)
    dmask = np.einsum("shjd,shjd->j", dkm, keys)
    return mse, grads, dmask


def _apply_codec(kind: str, params: dict, mask_idx: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Hard-mask reconstruction through the sliced (deployable) weights."""
    kt = keys[:, :, mask_idx, :]
    if kind == "linear":
        return np.einsum("hij,shjd->shid", params["w"][:, :, mask_idx], kt)
    h = np.einsum("hij,shjd->shid", params["w1"][:, :, mask_idx], kt) + params["b1"][None, :, :, None]
    a = _gelu(h)
    return np.einsum("hij,shjd->shid", params["w2"], a) + params["b2"][None, :, :, None]


def _eval_metrics(kind, params, mask_idx, keys) -> tuple[float, float]:
    khat = _apply_codec(kind, params, mask_idx, keys)
    mse = float(np.mean((khat - keys) ** 2))
    cosines = kernels.row_cosines(
        keys.reshape(-1, keys.shape[-1]), khat.reshape(-1, khat.shape[-1])
    )
    return mse, float(np.mean(cosines))


def _auto_learning_rate(data: np.ndarray) -> float:
    """Fixed step from a Hessian-scale estimate of the reconstruction MSE.

    Uses the largest eigenvalue (power iteration) of the head-summed token
    Gram; 1.8 / lambda_max keeps plain gradient descent inside the stability
    boundary of the quadratic (linear-kind) loss with margin, and masking
    only shrinks the curvature.
    """
    s, h, n, _ = data.shape
    gram = np.zeros((n, n))
    for si in range(s):
        for hi in range(h):
            gram += data[si, hi] @ data[si, hi].T
    gram *= 2.0 / data.size
    v = np.full(n, 1.0 / math.sqrt(n))
    lam = 0.0
    for _ in range(50):
        w = gram @ v
        nw = float(np.linalg.norm(w))
        if nw <= 1e-30:
            return 0.5
        v = w / nw
        lam = nw
    return 1.8 / lam


def _stack_key_samples(key_samples) -> np.ndarray:
    k = np.asarray(key_samples, dtype=np.float32)
    if k.ndim == 3:
        k = k[:, None, :, :]
    if k.ndim != 4:
        raise DimensionError(f"key samples must be (samples, heads, n, d), got {k.shape}")
    if k.shape[0] < 2:
        raise ParameterError("need at least 2 key samples for a train/val split")
    if not np.all(np.isfinite(k)):
        raise ParameterError("key samples contain non-finite values")
    return k


def train_key_codec(
    key_samples,
    retention: float,
    cfg: TrainConfig,
    kind: str = "linear",
) -> tuple[KeyCodec, TrainReport]:
    """Jointly train the retention mask and reconstructor for one layer.

    key_samples: (samples, heads, n, d_head); a missing head axis is treated
    as one head. Deterministic for a fixed config seed.
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown reconstructor kind {kind!r}")
    cfg.validate()
    data = _stack_key_samples(key_samples).astype(np.float64)
    samples, heads, n, d = data.shape
    k = effective_len(retention, n)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(samples)
    n_val = max(1, samples // 5)
    val, train = data[perm[:n_val]], data[perm[n_val:]]
    lr = cfg.learning_rate if cfg.learning_rate is not None else _auto_learning_rate(train)

    if kind == "linear":
        params = {"w": np.tile(np.eye(n), (heads, 1, 1))}
    else:
        hidden = cfg.hidden_width if cfg.hidden_width is not None else n
        if hidden < k:
            raise ParameterError(f"mlp2 hidden width {hidden} below retained length {k}")
        params = {
            "w1": rng.normal(0.0, 1.0 / math.sqrt(n), size=(heads, hidden, n)),
            "b1": np.zeros((heads, hidden)),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(heads, n, hidden)),
            "b2": np.zeros((heads, n)),
        }
    z = np.full(n, math.log(min(retention, 0.999) / (1.0 - min(retention, 0.999))))

    soft_epochs = int(round(cfg.epochs * cfg.soft_fraction))
    report = TrainReport()
    for epoch in range(cfg.epochs):
        if epoch < soft_epochs:
            phase = "soft"
            frac = epoch / max(1, soft_epochs - 1)
            tau = cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac
        else:
            phase, tau = "hard", cfg.tau_end

        m_soft = _sigmoid(z / tau)
        m = m_soft if phase == "soft" else get_mask(z, tau, retention, "hard")

        mse, grads, dmask = reconstruction_loss_and_grads(kind, params, m, train)
        p = float(np.mean(m_soft))
        loss = mse + cfg.mask_weight * mask_loss(p, retention)
        if not math.isfinite(loss):
            raise TrainingError(f"training loss diverged at epoch {epoch}", epoch=epoch)

        dm_dz = m_soft * (1.0 - m_soft) / tau
        dz = dmask * (dm_dz if phase == "soft" else 1.0)
        dz += cfg.mask_weight * _mask_loss_grad(p, retention) * dm_dz / n

        flat = np.concatenate([g.ravel() for g in grads.values()] + [dz.ravel()])
        gnorm = float(np.linalg.norm(flat))
        scale = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        for name, g in grads.items():
            params[name] -= lr * scale * g
        z -= lr * scale * dz

        mask_idx = hard_mask_indices(z, k)
        val_mse, val_cos = _eval_metrics(kind, params, mask_idx, val)
        report.epochs.append(EpochStats(epoch, phase, tau, mse, val_mse, val_cos, p))

    mask_idx = hard_mask_indices(z, k)
    if kind == "linear":
        weights = {"w": params["w"][:, :, mask_idx].astype(np.float32)}
    else:
        weights = {
            "w1": params["w1"][:, :, mask_idx].astype(np.float32),
            "b1": params["b1"].astype(np.float32),
            "w2": params["w2"].astype(np.float32),
            "b2": params["b2"].astype(np.float32),
        }
    codec = KeyCodec(mask=mask_idx, kind=kind, weights=weights, n=n)
    codec.validate()
    report.val_mse, report.val_cosine = _eval_metrics(kind, params, mask_idx, val)
    return codec, report


def compress_keys(codec: KeyCodec, keys) -> np.ndarray:
    """Row selection by the trained mask; retained rows are bit-exact copies."""
    k = np.asarray(keys, dtype=np.float32)
    if k.ndim == 2:
        k = k[None, :, :]
    if k.ndim != 3 or k.shape[1] != codec.n:
        raise DimensionError(f"keys must be (heads, {codec.n}, d_head), got {np.asarray(keys).shape}")
    return k[:, codec.mask, :].copy()


def reconstruct_keys(codec: KeyCodec, k_comp) -> np.ndarray:
    """Expand retained rows back to the full token length."""
    kt = np.asarray(k_comp, dtype=np.float32)
    if kt.ndim == 2:
        kt = kt[None, :, :]
    if kt.ndim != 3 or kt.shape[0] != codec.heads or kt.shape[1] != codec.k:
        raise DimensionError(
            f"compressed keys must be ({codec.heads}, {codec.k}, d_head), got {np.asarray(k_comp).shape}"
        )
    x = kt.astype(np.float64)
    if codec.kind == "linear":
        out = np.einsum("hij,hjd->hid", codec.weights["w"].astype(np.float64), x)
    else:
        w1 = codec.weights["w1"].astype(np.float64)
        w2 = codec.weights["w2"].astype(np.float64)
        b1 = codec.weights["b1"].astype(np.float64)
        b2 = codec.weights["b2"].astype(np.float64)
        h = np.einsum("hij,hjd->hid", w1, x) + b1[:, :, None]
        out = np.einsum("hij,hjd->hid", w2, _gelu(h)) + b2[:, :, None]
    return out.astype(np.float32)
