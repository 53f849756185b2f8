"""Exception types raised across the package."""

import numpy as np


class InputShapeError(ValueError):
    """Input batch does not match the network's input dimension."""


class CapacityError(MemoryError):
    """A dense allocation would exceed the configured memory budget."""


class EmptyDatasetError(ValueError):
    pass


class IncompatibleError(ValueError):
    """Two objects built from different configurations were combined."""


class SingularKernelError(np.linalg.LinAlgError):
    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class DivergenceError(FloatingPointError):
    def __init__(self, message, epoch=None, learning_rate=None, head_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.head_index = head_index


class ConfigError(ValueError):
    """Invalid experiment or dataset specification."""
