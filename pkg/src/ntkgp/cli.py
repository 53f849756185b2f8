"""Command line entry point: ``ntkgp <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, nn_core
from .errors import CapacityError, ConfigError, DivergenceError, SingularKernelError
from .gp_reference import KernelBundle, bound_gap
from .partial_svd import dense_partial_svd, matrix_free_partial_svd, principal_angles
from .posterior_cov import query_posterior_covariance, reported_std, save_bank, train_posterior_covariance
from .posterior_mean import query_posterior_mean, train_posterior_mean

log = logging.getLogger("ntkgp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
NUMERIC_ERRORS = (DivergenceError, SingularKernelError, CapacityError, FloatingPointError, np.linalg.LinAlgError)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_analytic(cfg, out: Path) -> int:
    a = harness.analytic_stage(cfg)
    stds = [reported_std(a[key])[0] for key in ("exact", "ub_full", "ub_k")]
    harness.write_curves(out / "analytic.csv", ("x", "analytic_mean", "analytic_std", "ub_full_std", "ub_k_std"),
                         [a["grid"], a["mean"], *stds])
    lower, upper = harness.ordering_violations(*stds)
    _write_json(out / "summary.json", {"violations_exact_le_ub_full": lower, "violations_ub_full_le_ub_k": upper,
                                       "sigma2": cfg.sigma2, "k": cfg.k})
    return EXIT_OK


def cmd_fit_mean(cfg, out: Path) -> int:
    a = harness.analytic_stage(cfg)
    start = time.perf_counter()
    head = train_posterior_mean(a["x"], a["y"], a["theta0"], cfg.mlp_config, cfg.mean_train,
                                mode=cfg.mode, log_path=out / "mean_train_log.csv")
    elapsed = time.perf_counter() - start
    gd = query_posterior_mean(head, a["xq"], cfg.mlp_config)
    harness.write_curves(out / "mean.csv", ("x", "analytic_mean", "gd_mean"), [a["grid"], a["mean"], gd])
    np.savez(out / "mean_head.npz", theta_star=head.theta_star.flat, theta_zero=head.theta_zero.flat)
    _write_json(out / "summary.json", {
        "mean_rmse": float(np.sqrt(np.mean((gd - a["mean"]) ** 2))),
        "final_loss": head.final_loss, "epochs_run": head.epochs_run, "seconds_fit_mean": elapsed,
    })
    return EXIT_OK


def cmd_fit_cov(cfg, out: Path) -> int:
    a = harness.analytic_stage(cfg)
    start = time.perf_counter()
    bank = train_posterior_covariance(a["x"], cfg.k, cfg.k_prime, a["theta0"], cfg.mlp_config, cfg.cov_train,
                                      svd_method=cfg.svd_method, mode=cfg.mode, workers=cfg.workers)
    elapsed = time.perf_counter() - start
    save_bank(bank, out / "bank.npz")
    gd_std, clamped = reported_std(query_posterior_covariance(bank, a["xq"], cfg.mlp_config).cov)
    stds = [reported_std(a[key])[0] for key in ("exact", "ub_full", "ub_k")]
    harness.write_curves(out / "cov.csv", ("x", "analytic_std", "ub_full_std", "ub_k_std", "gd_std"),
                         [a["grid"], *stds, gd_std])
    _write_json(out / "summary.json", {"gd_std_clamped": clamped, "seconds_fit_cov": elapsed,
                                       "k": bank.k, "k_prime": bank.k_prime})
    return EXIT_OK


def cmd_figure1(cfg, out: Path) -> int:
    report = harness.run_figure1(cfg, emit=False)
    harness.emit_artifacts(report, out)
    return EXIT_OK


def cmd_check_bounds(cfg, out: Path) -> int:
    a = harness.analytic_stage(cfg)
    s2 = cfg.sigma2
    kb = a["kernels"]
    k_tr = kb.k_train_train
    at_train = bound_gap(KernelBundle(k_tr, k_tr, k_tr), s2)
    general = bound_gap(kb, s2)
    result = {
        "sigma2": s2,
        "train_gap_max_eigenvalue": at_train[1],
        "train_gap_ok": bool(at_train[1] <= s2 + 1e-10),
        "general_gap_spectral_norm": general[2],
        "general_lambda_max_over_4": general[3] / 4,
        "general_gap_ok": bool(general[2] <= general[3] / 4 + 1e-10),
    }
    _write_json(out / "bounds.json", result)
    for key in ("train_gap_ok", "general_gap_ok"):
        print(f"{key}: {result[key]}")
    return EXIT_OK if result["train_gap_ok"] and result["general_gap_ok"] else EXIT_NUMERIC


def cmd_svd(cfg, out: Path) -> int:
    x_raw, _ = harness.make_dataset(cfg.dataset)
    x = harness.trig_normalize(x_raw, cfg.dataset.domain)
    theta0 = nn_core.init_params(cfg.mlp_config)
    view = nn_core.MLPJacobian(theta0, x, cfg.mlp_config)
    nn_core.reset_dense_allocations()
    mf = matrix_free_partial_svd(view.jvp, view.vjp, len(x), cfg.k, seed=cfg.cov_train.seed)
    allocations = nn_core.dense_allocations()
    result = {"k": cfg.k, "sigma_matrix_free": mf.sigma.tolist(), "iterations": mf.iterations,
              "dense_allocations_matrix_free": allocations}
    try:
        dense = dense_partial_svd(view, cfg.k)
        result["sigma_dense"] = dense.sigma.tolist()
        result["max_relative_error"] = float(np.max(np.abs(mf.sigma - dense.sigma) / dense.sigma))
        result["max_principal_angle"] = float(principal_angles(dense.u, mf.u).max())
    except CapacityError as err:
        result["dense_skipped"] = str(err)
    _write_json(out / "svd.json", result)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "analytic": (cmd_analytic, "analytic posterior and both upper bounds on the query grid"),
    "fit-mean": (cmd_fit_mean, "train the posterior-mean network"),
    "fit-cov": (cmd_fit_cov, "train the predictor bank and query its covariance"),
    "figure1": (cmd_figure1, "full four-panel comparison with CSV, JSON and SVG output"),
    "check-bounds": (cmd_check_bounds, "check the upper-bound gap inequalities on the toy kernels"),
    "svd": (cmd_svd, "matrix-free vs dense partial SVD of the training Jacobian"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkgp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set dataset.n=20 (repeatable)")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.ExperimentConfig.load(args.config, args.overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    out = args.out or cfg.output_dir or Path(".")
    try:
        harness.write_config(cfg, out)
        return COMMANDS[args.command][0](cfg, out)
    except Exception as err:
        code = _classify(err.cause if isinstance(err, harness.StageError) else err)
        if code is None:
            raise
        print(f"error: {err}", file=sys.stderr)
        return code


def _classify(err):
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(err, OSError):
        return EXIT_IO
    return None


if __name__ == "__main__":
    sys.exit(main())
