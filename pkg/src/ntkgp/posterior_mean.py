"""Posterior mean of the NTK-GP by regularized gradient descent.

Training minimizes ``mean((y_hat - f(x; theta))^2) + beta_n ||theta - theta0||^2``
from ``theta0`` with targets shifted by the initial network output, so that
``f(x'; theta*) - f(x'; theta0)`` estimates the zero-prior-mean posterior mean with
noise variance ``N * beta_n``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import DivergenceError, EmptyDatasetError, IncompatibleError
from .nn_core import MLPConfig, NetworkParams

log = logging.getLogger(__name__)

MODES = ("full", "linearized")
OPTIMIZERS = ("adam", "gd")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta_n: float = 0.0
    patience: int = 500
    max_epochs: int = 20000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.beta_n < 0:
            raise ValueError("beta_n must be non-negative")
        if not 0 < self.patience <= self.max_epochs:
            raise ValueError("need 0 < patience <= max_epochs")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class MeanHead:
    theta_star: NetworkParams
    theta_zero: NetworkParams
    final_loss: float
    epochs_run: int
    mode: str
    mlp_config: MLPConfig


class _LinearizedModel:
    """f(x; theta0) + J0 (theta - theta0) with J0 fixed at theta0."""

    def __init__(self, theta0: NetworkParams, x, config: MLPConfig):
        view = nn_core.MLPJacobian(theta0, x, config)
        self.f0 = view.outputs
        try:
            jac = view.dense()
            self._jvp = lambda d: jac @ d
            self._vjp = lambda r: jac.T @ r
        except nn_core.CapacityError:
            log.info("linearized model falls back to matrix-free products")
            self._jvp, self._vjp = view.jvp, view.vjp

    def outputs(self, disp):
        return self.f0 + self._jvp(disp)

    def pullback(self, r):
        return self._vjp(r)


def _objective(mode, theta0, x, targets, beta_n, config):
    n = x.shape[0]
    if mode == "full":
        def fn(flat):
            return nn_core.loss_grad_flat(flat, theta0.flat, x, targets, beta_n, config)
        return fn

    model = _LinearizedModel(theta0, x, config)
    base = theta0.flat

    def fn(flat):
        disp = flat - base
        resid = model.outputs(disp) - targets
        loss = float(resid @ resid / n + beta_n * (disp @ disp))
        return loss, (2.0 / n) * model.pullback(resid) + 2.0 * beta_n * disp
    return fn


def minimize(fn, start: np.ndarray, cfg: TrainConfig, log_path=None):
    """Full-batch Adam or gradient descent with patience stopping.

    Returns ``(best_params, best_loss, epochs_run)``; the best iterate seen is
    kept, not the last.  An epoch counts as an improvement when the loss drops
    by more than 1e-12 relative to the best so far.
    """
    theta = np.array(start, dtype=np.float64, copy=True)
    best, best_loss = theta.copy(), np.inf
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    buf = np.empty_like(theta)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    stale = 0
    epoch = 0
    rows = [] if log_path is not None else None
    for epoch in range(1, cfg.max_epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = fn(theta)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch} (learning rate {cfg.learning_rate:g})",
                epoch=epoch, learning_rate=cfg.learning_rate,
            )
        if rows is not None:
            rows.append((epoch, loss, float(np.linalg.norm(grad))))
        if loss < best_loss - 1e-12 * abs(best_loss) or best_loss == np.inf:
            best_loss = loss
            best[:] = theta
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if cfg.optimizer == "gd":
            theta -= cfg.learning_rate * grad
        else:
            m *= b1
            np.multiply(grad, 1 - b1, out=buf)
            m += buf
            v *= b2
            np.multiply(grad, grad, out=buf)
            buf *= 1 - b2
            v += buf
            # theta -= lr / bc1 * m / (sqrt(v / bc2) + eps)
            np.multiply(v, 1.0 / (1 - b2**epoch), out=buf)
            np.sqrt(buf, out=buf)
            buf += cfg.adam_eps
            np.divide(m, buf, out=buf)
            buf *= cfg.learning_rate / (1 - b1**epoch)
            theta -= buf
    if rows is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "grad_norm"])
            w.writerows((e, repr(l), repr(g)) for e, l, g in rows)
    return best, float(best_loss), epoch


def train_posterior_mean(x, y, theta0: NetworkParams, mlp_config: MLPConfig,
                         train_config: TrainConfig, mode: str = "full", log_path=None) -> MeanHead:
    """Fit a network to ``y`` with targets shifted by ``f(x; theta0)``.

    ``x`` are network inputs (already normalized), one row per training point.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = nn_core.check_inputs(x, mlp_config)
    nn_core.check_params(theta0, mlp_config)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] == 0:
        raise EmptyDatasetError("no training points")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")

    shifted = y + nn_core.forward(theta0, x, mlp_config)
    fn = _objective(mode, theta0, x, shifted, train_config.beta_n, mlp_config)
    flat, loss, epochs = minimize(fn, theta0.flat, train_config, log_path=log_path)
    log.debug("trained %s head: loss %.3e after %d epochs", mode, loss, epochs)
    return MeanHead(theta0.replace(flat), theta0, loss, epochs, mode, mlp_config)


def query_posterior_mean(head: MeanHead, x_query, mlp_config: MLPConfig) -> np.ndarray:
    """f(x'; theta*) - f(x'; theta0) for each query point, in the head's model mode."""
    if head.mlp_config != mlp_config:
        raise IncompatibleError("head was trained with a different network configuration")
    x_query = nn_core.check_inputs(x_query, mlp_config)
    if head.mode == "linearized":
        view = nn_core.MLPJacobian(head.theta_zero, x_query, mlp_config)
        return view.jvp(head.theta_star.flat - head.theta_zero.flat)
    return (nn_core.forward(head.theta_star, x_query, mlp_config)
            - nn_core.forward(head.theta_zero, x_query, mlp_config))
