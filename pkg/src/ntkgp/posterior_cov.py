"""Posterior covariance of the NTK-GP from a bank of trained predictor networks.

Eigen heads fit the leading left singular vectors of the training Jacobian; their
shifted outputs ``P`` give ``K(x', x') - P Sigma^2 P^T``, an upper bound on the
posterior covariance.  Optional noise heads fit draws ``eps ~ N(0, sigma2 I)`` and
subtract a Monte-Carlo estimate of the remaining ``sigma2 M M^T`` term.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import DivergenceError, IncompatibleError
from .gp_reference import KernelBundle, analytic_posterior, explained_decompose
from .nn_core import MLPConfig, NetworkParams
from .partial_svd import PartialSVD, dense_partial_svd, matrix_free_partial_svd
from .posterior_mean import MeanHead, TrainConfig, query_posterior_mean, train_posterior_mean

log = logging.getLogger(__name__)

SVD_METHODS = ("dense", "matrix_free")


@dataclass(frozen=True, eq=False)
class PredictorBank:
    svd: PartialSVD
    eigen_heads: tuple[MeanHead, ...]
    noise_heads: tuple[MeanHead, ...]
    noise_targets: np.ndarray  # (k_prime, N)
    sigma2: float
    theta_zero: NetworkParams
    mlp_config: MLPConfig
    train_config: TrainConfig
    mode: str

    @property
    def k(self) -> int:
        return len(self.eigen_heads)

    @property
    def k_prime(self) -> int:
        return len(self.noise_heads)

    def truncated(self, k: int | None = None, k_prime: int | None = None) -> PredictorBank:
        """Bank restricted to the first ``k`` eigen heads and ``k_prime`` noise heads."""
        k = self.k if k is None else k
        k_prime = self.k_prime if k_prime is None else k_prime
        if not (1 <= k <= self.k and 0 <= k_prime <= self.k_prime):
            raise ValueError("can only truncate to a subset of the trained heads")
        svd = PartialSVD(self.svd.u[:, :k], self.svd.sigma[:k], self.svd.iterations)
        return dataclasses.replace(
            self,
            svd=svd,
            eigen_heads=self.eigen_heads[:k],
            noise_heads=self.noise_heads[:k_prime],
            noise_targets=self.noise_targets[:k_prime],
        )


@dataclass(frozen=True, eq=False)
class CovEstimate:
    cov: np.ndarray
    mode: str  # "upper_bound" or "monte_carlo"
    k_used: int
    k_prime_used: int

    def reported_std(self) -> tuple[np.ndarray, int]:
        return reported_std(self.cov)


def reported_std(cov: np.ndarray) -> tuple[np.ndarray, int]:
    """Square root of the diagonal with negative entries clamped to 0, and the clamp count."""
    diag = np.diag(cov)
    negative = int(np.count_nonzero(diag < 0))
    if negative:
        log.info("clamped %d negative variance entries to zero", negative)
    return np.sqrt(np.clip(diag, 0.0, None)), negative


def noise_draws(k_prime: int, n: int, sigma2: float, seed: int) -> np.ndarray:
    """Rows are eps_i ~ N(0, sigma2 I); the first rows do not depend on ``k_prime``."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return np.sqrt(sigma2) * rng.standard_normal((k_prime, n))


def train_posterior_covariance(x, k: int, k_prime: int, theta0: NetworkParams,
                               mlp_config: MLPConfig, train_config: TrainConfig,
                               svd_method: str = "dense", mode: str = "full",
                               svd_iters: int = 200, workers: int = 1) -> PredictorBank:
    """Train eigen heads on the top-k left singular vectors and k_prime noise heads.

    The noise variance is ``N * train_config.beta_n``; noise targets are drawn
    from a Philox stream keyed by ``train_config.seed``.  Heads are independent,
    so ``workers > 1`` trains them on a thread pool; results keep index order.
    """
    x = nn_core.check_inputs(x, mlp_config)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k_prime < 0:
        raise ValueError("k_prime must be non-negative")
    if svd_method not in SVD_METHODS:
        raise ValueError(f"svd_method must be one of {SVD_METHODS}")

    view = nn_core.MLPJacobian(theta0, x, mlp_config)
    if svd_method == "dense":
        svd = dense_partial_svd(view, k)
    else:
        svd = matrix_free_partial_svd(view.jvp, view.vjp, n, k, iters=svd_iters, seed=train_config.seed)

    sigma2 = n * train_config.beta_n
    eps = noise_draws(k_prime, n, sigma2, train_config.seed)

    def fit(kind, index, target):
        try:
            return train_posterior_mean(x, target, theta0, mlp_config, train_config, mode=mode)
        except DivergenceError as err:
            raise DivergenceError(
                f"{kind} head {index}: {err}", epoch=err.epoch,
                learning_rate=err.learning_rate, head_index=index,
            ) from err

    jobs = [("eigen", i, svd.u[:, i]) for i in range(k)] + [("noise", i, eps[i]) for i in range(k_prime)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            heads = list(pool.map(lambda job: fit(*job), jobs))
    else:
        heads = [fit(*job) for job in jobs]
    eigen, noise = tuple(heads[:k]), tuple(heads[k:])
    return PredictorBank(svd, eigen, noise, eps, float(sigma2), theta0, mlp_config, train_config, mode)


def _head_outputs(heads, x_query, mlp_config) -> np.ndarray:
    if not heads:
        return np.zeros((x_query.shape[0], 0))
    return np.stack([query_posterior_mean(h, x_query, mlp_config) for h in heads], axis=1)


def query_posterior_covariance(bank: PredictorBank, x_query, mlp_config: MLPConfig) -> CovEstimate:
    """K(x', x') - P Sigma^2 P^T - P' P'^T / k_prime, with the last term only when k_prime > 0."""
    if bank.mlp_config != mlp_config:
        raise IncompatibleError("bank was trained with a different network configuration")
    x_query = nn_core.check_inputs(x_query, mlp_config)
    mode = "monte_carlo" if bank.k_prime else "upper_bound"
    if x_query.shape[0] == 0:
        return CovEstimate(np.zeros((0, 0)), mode, bank.k, bank.k_prime)

    view = nn_core.MLPJacobian(bank.theta_zero, x_query, mlp_config)
    cov = view.gram(view)
    p = _head_outputs(bank.eigen_heads, x_query, mlp_config)
    cov -= (p * bank.svd.sigma**2) @ p.T
    if bank.k_prime:
        q = _head_outputs(bank.noise_heads, x_query, mlp_config)
        cov -= q @ q.T / bank.k_prime
    cov = 0.5 * (cov + cov.T)
    return CovEstimate(cov, mode, bank.k, bank.k_prime)


def assemble_analytic_variants(kernels: KernelBundle, sigma2: float, k: int):
    """Exact posterior covariance, its upper bound, and the bound truncated to k eigenpairs.

    Returns ``(exact, ub_full, ub_k)`` with ``ub_full = exact + sigma2 M M^T`` and
    ``ub_k = K(x', x') - (M U_k) Lambda_k (M U_k)^T``.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    n = kernels.n_train
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    exact = analytic_posterior(kernels, np.zeros(n), np.zeros(n), np.zeros(kernels.n_test), sigma2).cov
    mu, lam, m = explained_decompose(kernels, sigma2)
    ub_full = exact + sigma2 * (m @ m.T)
    ub_full = 0.5 * (ub_full + ub_full.T)
    ub_k = kernels.k_test_test - (mu[:, :k] * lam[:k]) @ mu[:, :k].T
    ub_k = 0.5 * (ub_k + ub_k.T)
    return exact, ub_full, ub_k


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_bank(bank: PredictorBank, path) -> Path:
    """Write the bank to a single ``.npz`` holding parameter arrays and a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = bank.theta_zero.size
    manifest = {
        "format": "ntkgp-bank/1",
        "mode": bank.mode,
        "sigma2": bank.sigma2,
        "k": bank.k,
        "k_prime": bank.k_prime,
        "n_train": int(bank.svd.u.shape[0]),
        "n_params": p,
        "noise_seed": int(bank.train_config.seed),
        "init_seed": int(bank.mlp_config.seed),
        "mlp_config": bank.mlp_config.to_dict(),
        "train_config": bank.train_config.to_dict(),
        "mlp_config_hash": config_hash(bank.mlp_config.to_dict()),
        "train_config_hash": config_hash(bank.train_config.to_dict()),
        "svd_iterations": bank.svd.iterations,
        "eigen_heads": [{"final_loss": h.final_loss, "epochs_run": h.epochs_run} for h in bank.eigen_heads],
        "noise_heads": [{"final_loss": h.final_loss, "epochs_run": h.epochs_run} for h in bank.noise_heads],
    }
    arrays = {
        "theta_zero": bank.theta_zero.flat,
        "svd_u": bank.svd.u,
        "svd_sigma": bank.svd.sigma,
        "eigen_theta": np.stack([h.theta_star.flat for h in bank.eigen_heads]) if bank.k else np.zeros((0, p)),
        "noise_theta": np.stack([h.theta_star.flat for h in bank.noise_heads]) if bank.k_prime else np.zeros((0, p)),
        "noise_targets": bank.noise_targets,
        "manifest": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8),
    }
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_bank(path) -> PredictorBank:
    with np.load(Path(path)) as data:
        manifest = json.loads(data["manifest"].tobytes().decode())
        arrays = {key: data[key] for key in data.files if key != "manifest"}
    mlp_config = MLPConfig(**{**manifest["mlp_config"], "layer_sizes": tuple(manifest["mlp_config"]["layer_sizes"])})
    train_config = TrainConfig(**manifest["train_config"])
    if config_hash(mlp_config.to_dict()) != manifest["mlp_config_hash"]:
        raise IncompatibleError("network configuration does not match its recorded hash")
    theta0 = NetworkParams(arrays["theta_zero"], mlp_config.layer_sizes)

    def heads(key, meta):
        return tuple(
            MeanHead(theta0.replace(flat), theta0, m["final_loss"], m["epochs_run"], manifest["mode"], mlp_config)
            for flat, m in zip(arrays[key], meta)
        )

    svd = PartialSVD(arrays["svd_u"], arrays["svd_sigma"], manifest["svd_iterations"])
    return PredictorBank(
        svd,
        heads("eigen_theta", manifest["eigen_heads"]),
        heads("noise_theta", manifest["noise_heads"]),
        arrays["noise_targets"],
        manifest["sigma2"],
        theta0,
        mlp_config,
        train_config,
        manifest["mode"],
    )
