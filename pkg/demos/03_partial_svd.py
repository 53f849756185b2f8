"""
Top singular vectors without the Jacobian
=========================================

Block subspace iteration driven only by jvp/vjp products finds the same
leading singular values and subspace as a dense SVD.
"""

import numpy as np

from ntkgp import nn_core
from ntkgp.harness import DatasetSpec, make_dataset, trig_normalize
from ntkgp.partial_svd import dense_partial_svd, matrix_free_partial_svd, principal_angles

x, _ = make_dataset(DatasetSpec())
inputs = trig_normalize(x, (-2, 2))
cfg = nn_core.MLPConfig((2, 512, 512, 1))
view = nn_core.jacobian(nn_core.init_params(cfg), inputs, cfg)

nn_core.reset_dense_allocations()
mf = matrix_free_partial_svd(view.jvp, view.vjp, len(x), 5, seed=0)
print("matrix-free sigma:", mf.sigma, f"({mf.iterations} sweeps)")
print("dense Jacobians built:", nn_core.dense_allocations())

dense = dense_partial_svd(view, 5)
print("relative error:", np.abs(mf.sigma - dense.sigma) / dense.sigma)
print("largest principal angle:", principal_angles(dense.u, mf.u).max())
