"""Top-k left singular vectors and singular values of a Jacobian.

Two routes: a dense full SVD truncated to ``k``, and block subspace iteration on
``v -> J (J^T v)`` that touches the Jacobian only through jvp/vjp products.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError

log = logging.getLogger(__name__)

OVERSAMPLING = 8


@dataclass(frozen=True, eq=False)
class PartialSVD:
    u: np.ndarray  # (N, k), orthonormal columns
    sigma: np.ndarray  # (k,), descending
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.sigma.shape[0]


def _fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def dense_partial_svd(jac, k: int) -> PartialSVD:
    n = jac.n_rows
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    mat = jac.dense()
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    return PartialSVD(_fix_signs(u[:, :k]), s[:k].copy())


def _orthonormalize(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y)
    return q


def matrix_free_partial_svd(jvp, vjp, n_rows: int, k: int, iters: int = 200, seed=0,
                            tol: float = 1e-10) -> PartialSVD:
    """Subspace iteration on the N x N operator J J^T with Rayleigh-Ritz extraction.

    The block has ``k + 8`` columns (capped at ``n_rows``).  Iteration stops after
    ``iters`` sweeps, or once the top-k Ritz values move by less than ``tol``
    between sweeps and their residuals ``||A u - lam u||`` fall below ``tol``,
    both relative to the leading Ritz value.
    """
    if not 1 <= k <= n_rows:
        raise ValueError(f"k must lie in [1, {n_rows}], got {k}")
    if iters < 1:
        raise ValueError("iters must be at least 1")

    def apply(block):
        out = np.empty_like(block)
        for j in range(block.shape[1]):
            out[:, j] = jvp(vjp(block[:, j]))
        if not np.all(np.isfinite(out)):
            raise DivergenceError("non-finite values in J J^T product during subspace iteration")
        return out

    width = min(k + OVERSAMPLING, n_rows)
    rng = np.random.Generator(np.random.Philox(int(seed)))
    q = _orthonormalize(rng.standard_normal((n_rows, width)))
    prev = None
    ritz_vals = ritz_vecs = None
    it = 0
    for it in range(1, iters + 1):
        aq = apply(q)
        t = q.T @ aq
        vals, vecs = np.linalg.eigh(0.5 * (t + t.T))
        order = np.argsort(-vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
        ritz_vals = vals
        ritz_vecs = q @ vecs
        # residual of the top-k Ritz pairs: A u - lam u, with A u = (AQ) vecs
        resid = aq @ vecs[:, :k] - ritz_vecs[:, :k] * vals[:k]
        scale = max(abs(vals[0]), np.finfo(float).tiny)
        res_norm = np.linalg.norm(resid, axis=0).max() / scale
        if prev is not None:
            change = np.max(np.abs(vals[:k] - prev)) / scale
            if change < tol and res_norm < tol:
                break
        prev = vals[:k].copy()
        q = _orthonormalize(aq @ vecs)
    log.debug("subspace iteration stopped after %d sweeps", it)
    sigma = np.sqrt(np.clip(ritz_vals[:k], 0.0, None))
    return PartialSVD(_fix_signs(_orthonormalize_keep(ritz_vecs[:, :k])), sigma, iterations=it)


def _orthonormalize_keep(u: np.ndarray) -> np.ndarray:
    """Re-orthonormalize nearly-orthonormal columns without reordering or sign changes."""
    q, r = np.linalg.qr(u)
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spaces of two orthonormal bases."""
    # arccos is ill-conditioned near 1; take sines from the part of b outside span(a)
    resid = b - a @ (a.T @ b)
    sines = np.linalg.svd(resid, compute_uv=False)
    return np.arcsin(np.clip(sines, 0.0, 1.0))
