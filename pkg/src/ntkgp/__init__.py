"""NTK-GP posterior mean and covariance from trained networks, with analytic references."""

from .errors import (
    CapacityError,
    ConfigError,
    DivergenceError,
    EmptyDatasetError,
    IncompatibleError,
    InputShapeError,
    SingularKernelError,
)
from .nn_core import MLPConfig, NetworkParams, forward, init_params, jacobian
from .posterior_cov import assemble_analytic_variants, query_posterior_covariance, train_posterior_covariance
from .posterior_mean import TrainConfig, query_posterior_mean, train_posterior_mean

__version__ = "0.1.0"
