"""
The four-panel comparison
=========================

The full pipeline at reduced width: analytic posterior, both bounds and the
gradient-descent estimate, written as curves.csv, summary.json and SVG panels.
The same run is available from the command line as `ntkgp figure1`.
"""

import json
import sys

from ntkgp.harness import ExperimentConfig, run_figure1

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo_figure1"
cfg = ExperimentConfig.from_dict({
    "mlp": {"hidden_sizes": [128, 128]},
    "mean_train": {"max_epochs": 3000},
    "cov_train": {"max_epochs": 1500},
    "output_dir": out,
})
report = run_figure1(cfg)
keep = ("mean_rmse", "std_rmse_ub_full", "std_rmse_ub_k", "std_rmse_gd_vs_ub_k",
        "violations_exact_le_ub_full", "violations_ub_full_le_ub_k")
print(json.dumps({k: report.metrics[k] for k in keep}, indent=2))
print("artifacts in", out)
