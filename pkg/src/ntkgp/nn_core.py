"""Multilayer perceptron in NTK parameterization with exact reverse-mode derivatives.

Hidden layer ``l`` computes ``softplus(W a / sqrt(fan_in) + b; beta)`` and the
output layer computes ``c_out / sqrt(fan_in) * W a`` without a bias.  Parameters
are stored as one flat float64 vector; per-layer arrays are views into it.

Flat layout: for every hidden layer the weight matrix (row-major) followed by its
bias vector, then the output weight matrix.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CapacityError, EmptyDatasetError, IncompatibleError, InputShapeError

DEFAULT_MEMORY_BUDGET = 512 * 2**20  # bytes

_dense_lock = threading.Lock()
_dense_count = 0


def dense_allocations() -> int:
    """Number of dense network Jacobians materialized since the last reset."""
    return _dense_count


def reset_dense_allocations() -> None:
    global _dense_count
    with _dense_lock:
        _dense_count = 0


def _count_dense() -> None:
    global _dense_count
    with _dense_lock:
        _dense_count += 1


@dataclass(frozen=True)
class MLPConfig:
    layer_sizes: tuple[int, ...]
    softplus_beta: float = 87.09
    output_scale: float = 3.5
    sigma_w: float = 1.0
    sigma_b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("layer_sizes needs at least one hidden layer")
        if any(n <= 0 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] != 1:
            raise ValueError("the network has a scalar output; last layer size must be 1")
        if not (self.softplus_beta > 0 and self.output_scale > 0):
            raise ValueError("softplus_beta and output_scale must be positive")
        # zero std is allowed and gives a degenerate (all-zero) draw
        if not (self.sigma_w >= 0 and self.sigma_b >= 0):
            raise ValueError("sigma_w and sigma_b must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int, ...] | None]]:
        """(weight shape, bias shape or None) for every layer, input to output."""
        sizes = self.layer_sizes
        shapes = []
        for l in range(1, len(sizes)):
            bias = (sizes[l],) if l < len(sizes) - 1 else None
            shapes.append(((sizes[l], sizes[l - 1]), bias))
        return shapes

    @property
    def n_params(self) -> int:
        total = 0
        for w_shape, b_shape in self.layer_shapes():
            total += w_shape[0] * w_shape[1] + (b_shape[0] if b_shape else 0)
        return total

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "softplus_beta": self.softplus_beta,
            "output_scale": self.output_scale,
            "sigma_w": self.sigma_w,
            "sigma_b": self.sigma_b,
            "seed": int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Flat parameter vector together with the layer sizes that give it shape."""

    flat: np.ndarray
    layer_sizes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64, copy=True).ravel()
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        expected = _count_params(self.layer_sizes)
        if flat.size != expected:
            raise ValueError(f"flat vector has {flat.size} entries, layer sizes imply {expected}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")

    @property
    def size(self) -> int:
        return self.flat.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        return unflatten(self.flat, self.layer_sizes)

    def replace(self, flat: np.ndarray) -> NetworkParams:
        return NetworkParams(flat, self.layer_sizes)


def _count_params(sizes) -> int:
    total = 0
    for l in range(1, len(sizes)):
        total += sizes[l] * sizes[l - 1]
        if l < len(sizes) - 1:
            total += sizes[l]
    return total


def unflatten(flat: np.ndarray, layer_sizes) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split a flat vector into per-layer (W, b) views; b is None for the output layer."""
    flat = np.asarray(flat)
    if flat.size != _count_params(layer_sizes):
        raise ValueError("flat vector length does not match layer sizes")
    layers = []
    offset = 0
    n_layers = len(layer_sizes) - 1
    for l in range(1, n_layers + 1):
        rows, cols = layer_sizes[l], layer_sizes[l - 1]
        W = flat[offset:offset + rows * cols].reshape(rows, cols)
        offset += rows * cols
        b = None
        if l < n_layers:
            b = flat[offset:offset + rows]
            offset += rows
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        if b is not None:
            parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_params(config: MLPConfig) -> NetworkParams:
    """Draw W ~ N(0, sigma_w^2) and b ~ N(0, sigma_b^2) from a Philox stream keyed by seed."""
    rng = np.random.Generator(np.random.Philox(int(config.seed)))
    layers = []
    for w_shape, b_shape in config.layer_shapes():
        W = config.sigma_w * rng.standard_normal(w_shape)
        b = config.sigma_b * rng.standard_normal(b_shape) if b_shape else None
        layers.append((W, b))
    return NetworkParams(flatten(layers), config.layer_sizes)


def softplus(z, beta: float):
    """log(1 + exp(beta z)) / beta, evaluated without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-beta * np.abs(z))) / beta


def softplus_grad(z, beta: float):
    return expit(beta * np.asarray(z, dtype=np.float64))


def check_inputs(inputs, config: MLPConfig) -> np.ndarray:
    """Coerce inputs to a float64 (n, input_dim) array."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1 and config.input_dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise InputShapeError(
            f"expected inputs of shape (n, {config.input_dim}), got {np.shape(inputs)}"
        )
    return x


def check_params(params: NetworkParams, config: MLPConfig) -> None:
    if params.layer_sizes != config.layer_sizes:
        raise IncompatibleError(
            f"params built for {params.layer_sizes}, config has {config.layer_sizes}"
        )


class _Trace:
    """Forward pass record: pre-activations and activations of every hidden layer."""

    def __init__(self, layers, x, config: MLPConfig):
        self.layers = layers
        self.beta = config.softplus_beta
        self.out_coef = config.output_scale / math.sqrt(layers[-1][0].shape[1])
        self.acts = [x]
        self.pre = []
        a = x
        for W, b in layers[:-1]:
            z = a @ W.T / math.sqrt(W.shape[1]) + b
            a = softplus(z, self.beta)
            self.pre.append(z)
            self.acts.append(a)
        self.out = self.out_coef * (a @ layers[-1][0][0])

    def deltas(self, cotangent=None):
        """Backpropagated pre-activation sensitivities for each hidden layer.

        With ``cotangent=None`` every row is seeded with 1, giving per-row deltas;
        otherwise row ``n`` is seeded with ``cotangent[n]``.
        """
        W_out = self.layers[-1][0][0]
        n = self.acts[0].shape[0]
        seed = np.ones(n) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
        g = seed[:, None] * (self.out_coef * W_out)[None, :]
        deltas = [None] * len(self.pre)
        for l in range(len(self.pre) - 1, -1, -1):
            d = g * softplus_grad(self.pre[l], self.beta)
            deltas[l] = d
            if l > 0:
                W = self.layers[l][0]
                g = d @ W / math.sqrt(W.shape[1])
        return seed, deltas

    def vjp(self, u) -> np.ndarray:
        seed, deltas = self.deltas(u)
        n_params = sum(W.size + (0 if b is None else b.size) for W, b in self.layers)
        out = np.empty(n_params)
        offset = 0
        for l, (W, _) in enumerate(self.layers[:-1]):
            rows, cols = W.shape
            block = out[offset:offset + rows * cols].reshape(rows, cols)
            np.matmul(deltas[l].T / math.sqrt(cols), self.acts[l], out=block)
            offset += rows * cols
            out[offset:offset + rows] = deltas[l].sum(axis=0)
            offset += rows
        np.matmul(self.out_coef * seed, self.acts[-1], out=out[offset:])
        return out

    def jvp(self, v, layer_sizes) -> np.ndarray:
        tangents = unflatten(np.asarray(v, dtype=np.float64), layer_sizes)
        a_dot = np.zeros_like(self.acts[0])
        for l, (W, _) in enumerate(self.layers[:-1]):
            dW, db = tangents[l]
            scale = math.sqrt(W.shape[1])
            z_dot = (a_dot @ W.T + self.acts[l] @ dW.T) / scale + db
            a_dot = softplus_grad(self.pre[l], self.beta) * z_dot
        W_out = self.layers[-1][0][0]
        dW_out = tangents[-1][0][0]
        return self.out_coef * (a_dot @ W_out + self.acts[-1] @ dW_out)

    def rows(self) -> np.ndarray:
        """Per-input gradients stacked into an (n, p) matrix."""
        seed, deltas = self.deltas()
        n = seed.shape[0]
        parts = []
        for l, (W, _) in enumerate(self.layers[:-1]):
            dW = deltas[l][:, :, None] * self.acts[l][:, None, :] / math.sqrt(W.shape[1])
            parts.append(dW.reshape(n, -1))
            parts.append(deltas[l])
        parts.append(self.out_coef * self.acts[-1])
        return np.concatenate(parts, axis=1)

    def gram_factors(self):
        """Per-layer (delta, activation) pairs whose products sum to J J^T."""
        _, deltas = self.deltas()
        factors = []
        for l, (W, _) in enumerate(self.layers[:-1]):
            factors.append((deltas[l], self.acts[l] / math.sqrt(W.shape[1])))
        factors.append((None, self.out_coef * self.acts[-1]))
        return factors


def forward(params: NetworkParams, inputs, config: MLPConfig) -> np.ndarray:
    check_params(params, config)
    x = check_inputs(inputs, config)
    return _Trace(params.layers(), x, config).out


class DenseJacobian:
    """Explicit Jacobian matrix exposing the same interface as :class:`MLPJacobian`."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]

    def jvp(self, v) -> np.ndarray:
        return self.matrix @ v

    def vjp(self, u) -> np.ndarray:
        return self.matrix.T @ u

    def dense(self) -> np.ndarray:
        return self.matrix

    def gram(self, other) -> np.ndarray:
        return self.matrix @ other.dense().T


class MLPJacobian:
    """Jacobian of the network outputs at fixed (params, inputs), kept matrix-free.

    ``jvp`` and ``vjp`` never build the full matrix; ``dense`` does, subject to
    the memory budget.
    """

    def __init__(self, params: NetworkParams, inputs, config: MLPConfig, memory_budget=None):
        check_params(params, config)
        self.params = params
        self.config = config
        self.inputs = check_inputs(inputs, config)
        self.memory_budget = DEFAULT_MEMORY_BUDGET if memory_budget is None else memory_budget
        self._trace = _Trace(params.layers(), self.inputs, config)

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def outputs(self) -> np.ndarray:
        return self._trace.out

    def jvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError(f"tangent must have shape ({self.n_params},)")
        return self._trace.jvp(v, self.config.layer_sizes)

    def vjp(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n_rows,):
            raise ValueError(f"cotangent must have shape ({self.n_rows},)")
        return self._trace.vjp(u)

    def dense(self) -> np.ndarray:
        nbytes = self.n_rows * self.n_params * 8
        if nbytes > self.memory_budget:
            raise CapacityError(
                f"dense Jacobian needs {nbytes / 2**20:.1f} MiB, budget is "
                f"{self.memory_budget / 2**20:.1f} MiB; use the jvp/vjp operators instead"
            )
        _count_dense()
        return self._trace.rows()

    def gram(self, other) -> np.ndarray:
        """J_self J_other^T, exploiting the layer structure when both are network Jacobians."""
        if not isinstance(other, MLPJacobian):
            return self.dense() @ other.dense().T
        if other.params is not self.params and not np.array_equal(other.params.flat, self.params.flat):
            raise IncompatibleError("Jacobians taken at different parameters")
        out = np.zeros((self.n_rows, other.n_rows))
        for (d1, a1), (d2, a2) in zip(self._trace.gram_factors(), other._trace.gram_factors()):
            inner = a1 @ a2.T
            if d1 is None:
                out += inner
            else:
                out += (d1 @ d2.T) * (inner + 1.0)
        return out


def jacobian(params: NetworkParams, inputs, config: MLPConfig, *, dense=False, memory_budget=None):
    """Jacobian of ``forward`` w.r.t. the flat parameters, matrix-free unless ``dense``."""
    view = MLPJacobian(params, inputs, config, memory_budget=memory_budget)
    if dense:
        return DenseJacobian(view.dense())
    return view


def loss_grad(params: NetworkParams, theta0: NetworkParams, inputs, targets, beta_n: float,
              config: MLPConfig) -> tuple[float, np.ndarray]:
    """Value and gradient of mean((y - f)^2) + beta_n * ||theta - theta0||^2."""
    check_params(params, config)
    check_params(theta0, config)
    x = check_inputs(inputs, config)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape[0] == 0:
        raise EmptyDatasetError("loss over an empty dataset")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    return loss_grad_flat(params.flat, theta0.flat, x, y, beta_n, config)


def loss_grad_flat(flat, flat0, x, y, beta_n, config: MLPConfig):
    """``loss_grad`` on raw vectors with validated inputs; no finiteness check on ``flat``."""
    trace = _Trace(unflatten(flat, config.layer_sizes), x, config)
    n = x.shape[0]
    resid = trace.out - y
    disp = flat - flat0
    loss = float(resid @ resid / n + beta_n * (disp @ disp))
    grad = trace.vjp((2.0 / n) * resid)
    disp *= 2.0 * beta_n
    grad += disp
    return loss, grad


def linearized_forward(params: NetworkParams, theta0: NetworkParams, inputs, config: MLPConfig) -> np.ndarray:
    """f(x; theta0) + J_theta0(x) (theta - theta0)."""
    check_params(params, config)
    view = MLPJacobian(theta0, inputs, config)
    return view.outputs + view.jvp(params.flat - theta0.flat)
