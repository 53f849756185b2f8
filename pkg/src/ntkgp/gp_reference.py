"""Closed-form NTK-GP posterior and the quantities used to check the gradient-descent estimators.

Kernel blocks follow ``K(A, B)[i, j] = k(a_i, b_j)``, so the test/train block is
``(J, N)`` and the posterior mean reads ``m(x') + K(x', x) (K(x, x) + s2 I)^-1 (y - m(x))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import IncompatibleError, SingularKernelError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class KernelBundle:
    k_train_train: np.ndarray
    k_test_train: np.ndarray
    k_test_test: np.ndarray

    @property
    def n_train(self) -> int:
        return self.k_train_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.k_test_test.shape[0]


@dataclass(frozen=True, eq=False)
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray
    noise_sigma2: float

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True, eq=False)
class EigenDecomp:
    u: np.ndarray
    lam: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.lam) @ self.u.T


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def build_kernels(jac_train, jac_test) -> KernelBundle:
    """Gram blocks J(x)J(x)^T, J(x')J(x)^T and J(x')J(x')^T."""
    if jac_train.n_params != jac_test.n_params:
        raise IncompatibleError(
            f"Jacobians have {jac_train.n_params} and {jac_test.n_params} parameters"
        )
    k_tt = _sym(jac_train.gram(jac_train))
    k_st = jac_test.gram(jac_train)
    k_ss = _sym(jac_test.gram(jac_test))
    return KernelBundle(k_tt, k_st, k_ss)


def eigendecompose(k: np.ndarray) -> EigenDecomp:
    """Eigenpairs of a symmetric PSD matrix, eigenvalues descending and clipped at 0."""
    lam, u = np.linalg.eigh(_sym(k))
    order = np.argsort(-lam, kind="stable")
    return EigenDecomp(u[:, order], np.clip(lam[order], 0.0, None))


def _factor(k: np.ndarray, sigma2: float):
    """Cholesky factor of K + sigma2 I, escalating diagonal jitter when it fails."""
    n = k.shape[0]
    a = k + sigma2 * np.eye(n)
    trace = max(float(np.trace(k)), 1e-300)
    if sigma2 == 0:
        lam_min = np.linalg.eigvalsh(k)[0] if n else 0.0
        if lam_min <= 1e-10 * trace:
            raise SingularKernelError(
                f"K(x, x) is singular at zero noise: smallest eigenvalue {lam_min:.3e}",
                eigenvalue=lam_min,
            )
    try:
        return sla.cho_factor(a, lower=True)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * trace
    while jitter <= 1e-6 * trace:
        try:
            fac = sla.cho_factor(a + jitter * np.eye(n), lower=True)
            log.warning("Cholesky needed diagonal jitter %.3e", jitter)
            return fac
        except np.linalg.LinAlgError:
            jitter *= 10
    lam_min = np.linalg.eigvalsh(a)[0]
    raise SingularKernelError(
        f"K + sigma2 I not positive definite: smallest eigenvalue {lam_min:.3e}",
        eigenvalue=lam_min,
    )


def solve_train(kernels: KernelBundle, sigma2: float, rhs: np.ndarray) -> np.ndarray:
    """(K(x, x) + sigma2 I)^-1 rhs."""
    if kernels.n_train == 0:
        return np.zeros_like(rhs)
    return sla.cho_solve(_factor(kernels.k_train_train, sigma2), rhs)


def gain_matrix(kernels: KernelBundle, sigma2: float) -> np.ndarray:
    """M = K(x', x) (K(x, x) + sigma2 I)^-1, shape (J, N)."""
    if kernels.n_test == 0 or kernels.n_train == 0:
        return np.zeros((kernels.n_test, kernels.n_train))
    # K is symmetric so M^T = (K + s2 I)^-1 K(x', x)^T
    return solve_train(kernels, sigma2, kernels.k_test_train.T).T


def analytic_posterior(kernels: KernelBundle, y, prior_mean_train, prior_mean_test,
                       sigma2: float) -> PosteriorMoments:
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    m = gain_matrix(kernels, sigma2)
    mean = np.asarray(prior_mean_test, dtype=np.float64) + m @ (y - prior_mean_train)
    cov = _sym(kernels.k_test_test - m @ kernels.k_test_train.T)
    return PosteriorMoments(mean, cov, float(sigma2))


def explained_decompose(kernels: KernelBundle, sigma2: float):
    """Return (MU, lambda, M) with K(x,x) = U diag(lambda) U^T.

    (MU) diag(lambda) (MU)^T + sigma2 M M^T equals K(x',x)(K+sigma2 I)^-1 K(x',x)^T.
    """
    m = gain_matrix(kernels, sigma2)
    eig = eigendecompose(kernels.k_train_train)
    return m @ eig.u, eig.lam, m


def bound_gap(kernels: KernelBundle, sigma2: float):
    """The term sigma2 M M^T dropped by the upper-bound estimator, and the quantities bounding it.

    Returns (gap, train_eigen_max, spectral_norm, lambda_max_test) where
    ``train_eigen_max`` is the largest eigenvalue of the gap evaluated with x' = x.
    """
    if sigma2 <= 0:
        raise ValueError("bound_gap needs sigma2 > 0")
    m = gain_matrix(kernels, sigma2)
    gap = _sym(sigma2 * m @ m.T)

    k = kernels.k_train_train
    train = KernelBundle(k, k, k)
    m_train = gain_matrix(train, sigma2)
    gap_train = _sym(sigma2 * m_train @ m_train.T)
    train_eigen_max = float(np.linalg.eigvalsh(gap_train)[-1]) if k.size else 0.0

    spectral_norm = float(np.linalg.norm(gap, 2)) if gap.size else 0.0
    lam_test = float(np.linalg.eigvalsh(kernels.k_test_test)[-1]) if gap.size else 0.0
    return gap, train_eigen_max, spectral_norm, lam_test
