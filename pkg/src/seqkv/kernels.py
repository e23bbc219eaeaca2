"""Dense linear-algebra kernels the rest of the package builds on.

Conventions: matrices are 2-D row-major float32 arrays (the cache storage
dtype); dot products accumulate in float64 and results are rounded back to
float32. The truncated SVD goes through a cyclic-Jacobi eigendecomposition
of the smaller Gram matrix, which keeps the package dependency-free and
bit-reproducible across runs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateRowError, DimensionError, NumericError, ParameterError

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100

# Rows with norm at or below this are treated as directionless.
DEGENERATE_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce input to a 2-D float32 array, rejecting non-finite entries."""
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(a)


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to float32."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.float32)


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    x = as_matrix(logits, "logits").astype(np.float64)
    x -= x.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=1, keepdims=True)
    return x.astype(np.float32)


def pairwise_cosine(x) -> np.ndarray:
    """Pairwise cosine similarity between rows.

    Returns a symmetric matrix with unit diagonal and entries clipped to
    [-1, 1]. Rows with norm <= DEGENERATE_NORM raise DegenerateRowError
    carrying the offending row indices.
    """
    a = as_matrix(x, "x").astype(np.float64)
    norms = np.linalg.norm(a, axis=1)
    bad = np.nonzero(norms <= DEGENERATE_NORM)[0]
    if bad.size:
        raise DegenerateRowError(
            f"rows with (near-)zero norm: {bad.tolist()}", rows=tuple(int(i) for i in bad)
        )
    unit = a / norms[:, None]
    sim = unit @ unit.T
    np.clip(sim, -1.0, 1.0, out=sim)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim.astype(np.float32)


def row_cosines(a, b) -> np.ndarray:
    """Cosine similarity between corresponding rows of two equal-shape matrices.

    Rows where both sides are (near-)zero count as 1.0; rows where exactly
    one side vanishes count as 0.0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionError(f"row_cosines needs equal 2-D shapes, got {x.shape} and {y.shape}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    dots = np.einsum("ij,ij->i", x, y)
    out = np.zeros(x.shape[0])
    both = (nx > DEGENERATE_NORM) & (ny > DEGENERATE_NORM)
    out[both] = dots[both] / (nx[both] * ny[both])
    out[(nx <= DEGENERATE_NORM) & (ny <= DEGENERATE_NORM)] = 1.0
    return np.clip(out, -1.0, 1.0)


def _jacobi_eigh(g: np.ndarray, tol: float = JACOBI_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvector columns in the same order).
    Convergence: off-diagonal Frobenius norm <= tol * ||g||_F within
    JACOBI_MAX_SWEEPS sweeps, else NumericError with the sweep count.
    """
    a = np.array(g, dtype=np.float64)
    m = a.shape[0]
    v = np.eye(m)
    norm = np.linalg.norm(a)
    if m == 1 or norm == 0.0:
        order = np.argsort(-np.diag(a), kind="stable")
        return np.diag(a)[order], v[:, order]

    off_mask = ~np.eye(m, dtype=bool)
    for _ in range(JACOBI_MAX_SWEEPS):
        # measured directly from the off-diagonal entries; computing it as
        # ||A||^2 - ||diag||^2 floors out at sqrt(eps)*||A|| from cancellation
        off = math.sqrt(float(np.sum(a[off_mask] ** 2)))
        if off <= tol * norm:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericError(
            f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps",
            iterations=JACOBI_MAX_SWEEPS,
        )

    order = np.argsort(-np.diag(a), kind="stable")
    return np.diag(a)[order], v[:, order]


def _fix_component_signs(components: np.ndarray) -> np.ndarray:
    """Make each component's largest-magnitude entry nonnegative (ties: lower index)."""
    out = components.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0.0:
            out[i] = -out[i]
    return out


def orthonormal_completion(rows: np.ndarray, count: int, dim: int) -> np.ndarray:
    """Extend `rows` (orthonormal, shape r x dim) by `count` more orthonormal rows.

    Candidates are the canonical basis vectors in index order, Gram-Schmidt
    projected against everything accepted so far; deterministic by
    construction.
    """
    basis = [rows[i] for i in range(rows.shape[0])]
    added = []
    for j in range(dim):
        if len(added) == count:
            break
        cand = np.zeros(dim)
        cand[j] = 1.0
        for b in basis:
            cand -= (cand @ b) * b
        nrm = np.linalg.norm(cand)
        if nrm > 1e-6:
            cand /= nrm
            basis.append(cand)
            added.append(cand)
    if len(added) < count:
        raise NumericError("could not complete orthonormal basis")
    return np.stack(added)


def truncated_svd(x, k: int, tol: float = JACOBI_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Top-k left singular directions of `x` and their singular values.

    Returns (components, singular_values): components is k x rows with
    orthonormal rows spanning the dominant k-dimensional row-index subspace,
    so ||x - components.T @ components @ x||_F^2 equals the discarded
    spectrum's energy. When rank(x) < k the trailing components are a
    deterministic orthonormal completion and their singular values are 0.
    """
    a = as_matrix(x, "x")
    rows, cols = a.shape
    if not 1 <= k <= min(rows, cols):
        raise ParameterError(f"k={k} out of range [1, {min(rows, cols)}] for shape {a.shape}")

    if tol <= 0:
        raise ParameterError(f"tol must be positive, got {tol}")

    xf = a.astype(np.float64)
    if rows <= cols:
        evals, evecs = _jacobi_eigh(xf @ xf.T, tol)
        comps = evecs[:, :k].T
        sv = np.sqrt(np.clip(evals[:k], 0.0, None))
    else:
        evals, evecs = _jacobi_eigh(xf.T @ xf, tol)
        sv_all = np.sqrt(np.clip(evals, 0.0, None))
        cutoff = sv_all[0] * 1e-9 if sv_all[0] > 0 else 0.0
        kept = []
        for i in range(k):
            if sv_all[i] > cutoff:
                kept.append((xf @ evecs[:, i]) / sv_all[i])
        comps = np.stack(kept) if kept else np.zeros((0, rows))
        if comps.shape[0] < k:
            extra = orthonormal_completion(comps, k - comps.shape[0], rows)
            comps = np.vstack([comps, extra]) if comps.shape[0] else extra
        sv = sv_all[:k].copy()
        sv[len(kept):] = 0.0

    comps = _fix_component_signs(comps)
    return comps.astype(np.float32), sv
