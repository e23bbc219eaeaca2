"""Token-axis PCA compression and linear re-projection for visual values.

A value matrix V (n tokens x d_head) is centered, projected onto a learned
row basis U (k x n), and stored as U @ (V - 1 mu^T) plus the mean. Each KV
head gets its own basis; observations are the centered feature columns
pooled over all training samples of that head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError
from .retention import effective_len

MEAN_POLICIES = ("per_sample", "global")

ORTHONORMAL_TOL = 1e-4


@dataclass(frozen=True)
class ValuePca:
    """Per-layer value compressor: one k x n row basis per KV head."""

    basis: np.ndarray                 # (heads, k, n) float32, orthonormal rows
    mean_policy: str                  # "per_sample" or "global"
    global_mean: np.ndarray | None    # (heads, d_head) float32 iff policy == "global"

    @property
    def heads(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def n(self) -> int:
        return self.basis.shape[2]

    def validate(self, tol: float = ORTHONORMAL_TOL) -> None:
        if self.mean_policy not in MEAN_POLICIES:
            raise ParameterError(f"unknown mean policy {self.mean_policy!r}")
        if (self.global_mean is not None) != (self.mean_policy == "global"):
            raise ParameterError("global_mean must be present iff mean_policy == 'global'")
        if self.k > self.n:
            raise ParameterError(f"basis has more rows ({self.k}) than tokens ({self.n})")
        for h in range(self.heads):
            u = self.basis[h].astype(np.float64)
            gram = u @ u.T
            if np.max(np.abs(gram - np.eye(self.k))) > tol:
                raise ParameterError(f"basis rows of head {h} are not orthonormal within {tol}")


def _stack_samples(value_samples) -> np.ndarray:
    v = np.asarray(value_samples, dtype=np.float32)
    if v.ndim == 3:
        v = v[:, None, :, :]
    if v.ndim != 4:
        raise DimensionError(
            f"value samples must be (samples, heads, n, d_head), got shape {v.shape}"
        )
    if v.shape[0] < 1:
        raise ParameterError("need at least one value sample")
    return v


def _centered_columns(v: np.ndarray, mean_policy: str) -> tuple[np.ndarray, np.ndarray]:
    """Per head: (n x samples*d) matrix of centered columns, and the global mean."""
    samples, heads, n, d = v.shape
    x = v.astype(np.float64)
    gmean = x.mean(axis=(0, 2))  # (heads, d)
    if mean_policy == "per_sample":
        centered = x - x.mean(axis=2, keepdims=True)
    else:
        centered = x - gmean[None, :, None, :]
    cols = centered.transpose(1, 2, 0, 3).reshape(heads, n, samples * d)
    return cols, gmean


def fit_value_pca(value_samples, retention: float, mean_policy: str = "per_sample") -> ValuePca:
    """Fit per-head token-axis PCA bases retaining ceil(retention * n) rows.

    value_samples: (samples, heads, n, d_head) array (a missing head axis is
    treated as a single head). If the observation count is below the target
    rank a rank-deficiency warning is emitted and the basis is padded with a
    deterministic orthonormal completion.
    """
    if mean_policy not in MEAN_POLICIES:
        raise ParameterError(f"unknown mean policy {mean_policy!r}")
    v = _stack_samples(value_samples)
    samples, heads, n, d = v.shape
    k = effective_len(retention, n)

    cols, gmean = _centered_columns(v, mean_policy)
    if samples * d < k:
        warnings.warn(
            f"rank-deficient value PCA fit: {samples * d} observed columns for rank {k}; "
            "padding with orthonormal completion",
            RuntimeWarning,
            stacklevel=2,
        )
    basis = np.empty((heads, k, n), dtype=np.float32)
    k_fit = min(k, samples * d)
    for h in range(heads):
        comps, _ = kernels.truncated_svd(cols[h].astype(np.float32), k_fit)
        if k_fit < k:
            extra = kernels.orthonormal_completion(comps.astype(np.float64), k - k_fit, n)
            comps = np.vstack([comps, extra.astype(np.float32)])
        basis[h] = comps
    return ValuePca(
        basis=basis,
        mean_policy=mean_policy,
        global_mean=gmean.astype(np.float32) if mean_policy == "global" else None,
    )


def _check_values_shape(pca: ValuePca, v: np.ndarray, rows: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float32)
    if a.ndim == 2:
        a = a[None, :, :]
    if a.ndim != 3 or a.shape[0] != pca.heads or a.shape[1] != rows:
        raise DimensionError(
            f"{what} must have shape ({pca.heads}, {rows}, d_head), got {np.asarray(v).shape}"
        )
    return a


def compress_values(pca: ValuePca, v) -> tuple[np.ndarray, np.ndarray]:
    """Project values onto the basis; returns (compressed (heads,k,d), mean (heads,d))."""
    a = _check_values_shape(pca, v, pca.n, "values")
    x = a.astype(np.float64)
    if pca.mean_policy == "per_sample":
        mu = x.mean(axis=1)
    else:
        mu = pca.global_mean.astype(np.float64)
    centered = x - mu[:, None, :]
    vt = np.einsum("hkn,hnd->hkd", pca.basis.astype(np.float64), centered)
    return vt.astype(np.float32), mu.astype(np.float32)


def reconstruct_values(pca: ValuePca, v_comp, mean) -> np.ndarray:
    """Linear re-projection back to n tokens: U^T v_comp + 1 mu^T."""
    vt = _check_values_shape(pca, v_comp, pca.k, "compressed values")
    mu = np.asarray(mean, dtype=np.float32)
    if mu.ndim == 1:
        mu = mu[None, :]
    if mu.shape[0] != pca.heads or mu.shape[1] != vt.shape[2]:
        raise DimensionError(
            f"mean must have shape ({pca.heads}, {vt.shape[2]}), got {np.asarray(mean).shape}"
        )
    u = pca.basis.astype(np.float64)
    out = np.einsum("hkn,hkd->hnd", u, vt.astype(np.float64)) + mu.astype(np.float64)[:, None, :]
    return out.astype(np.float32)


def training_sq_error(pca: ValuePca, value_samples) -> float:
    """Total squared Frobenius reconstruction error of the centered training set."""
    v = _stack_samples(value_samples)
    cols, _ = _centered_columns(v, pca.mean_policy)
    err = 0.0
    for h in range(pca.heads):
        u = pca.basis[h].astype(np.float64)
        x = cols[h]
        resid = x - u.T @ (u @ x)
        err += float(np.sum(resid * resid))
    return err
