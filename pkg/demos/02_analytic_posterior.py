"""
The analytic NTK-GP posterior and its upper bounds
==================================================

Kernel regression on the toy task, the exact posterior covariance and the
two bounds obtained by dropping the noise term (all eigenvectors, or five).
"""

import numpy as np

from ntkgp.gp_reference import KernelBundle, bound_gap
from ntkgp.harness import ExperimentConfig, analytic_stage

cfg = ExperimentConfig.from_dict({"mlp": {"hidden_sizes": [256, 256]}, "grid": {"count": 61}})
a = analytic_stage(cfg)
print(f"N = {len(a['y'])}, sigma^2 = N beta_N = {cfg.sigma2:.4f}")

# std curves: exact <= upper bound (all eigenvectors) <= upper bound (k eigenvectors)
std = {name: np.sqrt(np.clip(np.diag(a[name]), 0, None)) for name in ("exact", "ub_full", "ub_k")}
for j in range(0, 61, 10):
    print(f"x' = {a['grid'][j]:+.1f}  mean {a['mean'][j]:+.3f}  "
          f"std {std['exact'][j]:.3f} <= {std['ub_full'][j]:.3f} <= {std['ub_k'][j]:.3f}")

# the gap between bound and exact covariance: at most sigma^2 on training
# inputs and lambda_max / 4 in spectral norm anywhere
k = a["kernels"].k_train_train
_, train_max, _, _ = bound_gap(KernelBundle(k, k, k), cfg.sigma2)
_, _, spectral, lam_max = bound_gap(a["kernels"], cfg.sigma2)
print(f"gap on training inputs {train_max:.4f} <= sigma^2 = {cfg.sigma2:.4f}")
print(f"gap on the grid {spectral:.4f} <= lambda_max / 4 = {lam_max / 4:.4f}")
