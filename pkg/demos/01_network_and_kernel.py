"""
The network, its Jacobian and the tangent kernel
================================================

A two-hidden-layer softplus MLP in NTK parameterization, the parameter
Jacobian at initialization, and the empirical kernel K = J J^T.
"""

import numpy as np

from ntkgp import nn_core
from ntkgp.harness import trig_normalize

# inputs live on [-2, 2] and enter the network as [sin t, cos t]
x = np.linspace(-2, 2, 7)
inputs = trig_normalize(x, (-2, 2))
cfg = nn_core.MLPConfig((2, 128, 128, 1), seed=0)
theta0 = nn_core.init_params(cfg)
print("parameters:", cfg.n_params)
print("f(x; theta0):", np.round(nn_core.forward(theta0, inputs, cfg), 4))

# the Jacobian is an operator; the dense matrix is only built on request
view = nn_core.jacobian(theta0, inputs, cfg)
rows = view.dense()
print("Jacobian shape:", rows.shape)

# a central difference on one coordinate agrees with the exact row entries
i, h = 1234, 1e-5
e = np.zeros(theta0.size)
e[i] = h
fd = (nn_core.forward(theta0.replace(theta0.flat + e), inputs, cfg)
      - nn_core.forward(theta0.replace(theta0.flat - e), inputs, cfg)) / (2 * h)
print("max |fd - J[:, i]|:", np.abs(fd - rows[:, i]).max())

# the kernel from the structured Gram matches J J^T without forming J
k = view.gram(view)
print("max |K - J J^T|:", np.abs(k - rows @ rows.T).max())
print("kernel eigenvalues:", np.round(np.linalg.eigvalsh(k)[::-1], 3))
