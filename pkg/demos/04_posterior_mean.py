"""
The posterior mean from a regularized network
=============================================

Training the linearized network with weight decay towards its initialization,
on targets shifted by the initial output, recovers kernel regression with
noise N * beta_N.  The nonlinear network lands close to it.
"""

import numpy as np

from ntkgp.harness import ExperimentConfig, analytic_stage
from ntkgp.posterior_mean import TrainConfig, query_posterior_mean, train_posterior_mean

cfg = ExperimentConfig.from_dict({"mlp": {"hidden_sizes": [64, 64]}, "dataset": {"n": 20},
                                  "beta_n": 0.05, "grid": {"count": 50}})
a = analytic_stage(cfg)
n = len(a["y"])

# plain gradient descent at step 1/L is enough for the convex linearized loss
lam_max = np.linalg.eigvalsh(a["kernels"].k_train_train)[-1]
lr = 1 / (2 * (lam_max / n + 0.05))
gd = TrainConfig(learning_rate=lr, beta_n=0.05, optimizer="gd", patience=500, max_epochs=200000)

for mode in ("linearized", "full"):
    head = train_posterior_mean(a["x"], a["y"], a["theta0"], cfg.mlp_config, gd, mode=mode)
    mean = query_posterior_mean(head, a["xq"], cfg.mlp_config)
    rel = np.sqrt(np.mean((mean - a["mean"]) ** 2) / np.mean(a["mean"] ** 2))
    print(f"{mode:>10}: {head.epochs_run} epochs, relative RMS vs kernel regression {rel:.2e}")
