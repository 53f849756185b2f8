"""Toy 1-d regression experiment: data, configuration, the four-panel comparison, artifacts."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import ConfigError
from .gp_reference import analytic_posterior, build_kernels
from .nn_core import MLPConfig
from .posterior_cov import (
    assemble_analytic_variants,
    query_posterior_covariance,
    reported_std,
    train_posterior_covariance,
)
from .posterior_mean import TrainConfig, query_posterior_mean, train_posterior_mean

log = logging.getLogger(__name__)

FUNCTIONS = {
    "sinusoid": lambda x: np.sin(2 * x),
    "sinusoid_plus_trend": lambda x: np.sin(2 * x) + 0.3 * x,
}

CURVE_COLUMNS = ("x", "analytic_mean", "analytic_std", "ub_full_std", "ub_k_std", "gd_mean", "gd_std")

ORDER_SLACK = 1e-6


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class DatasetSpec:
    function: str = "sinusoid"
    domain: tuple[float, float] = (-2.0, 2.0)
    gap: tuple[float, float] | None = (-0.5, 0.5)
    n: int = 30
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise ConfigError(f"unknown function {self.function!r}; choose from {sorted(FUNCTIONS)}")
        lo, hi = self.domain
        if not hi > lo:
            raise ConfigError(f"degenerate domain {self.domain}")
        if self.gap is not None:
            a, b = self.gap
            if not (lo <= a <= b <= hi):
                raise ConfigError(f"gap {self.gap} must lie inside domain {self.domain}")
        if self.n < 1:
            raise ConfigError("dataset needs n >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def make_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Uniform samples from the domain with the gap removed, y = f(x) + Gaussian noise."""
    lo, hi = spec.domain
    pieces = [(lo, hi)] if spec.gap is None else [(lo, spec.gap[0]), (spec.gap[1], hi)]
    pieces = [(a, b) for a, b in pieces if b > a]
    lengths = np.array([b - a for a, b in pieces])
    if not pieces or lengths.sum() <= 0:
        raise ConfigError("sampling region is empty: the gap covers the whole domain")
    rng = np.random.Generator(np.random.Philox(spec.seed))
    # invert the CDF of the uniform law on the union of pieces
    u = rng.uniform(0.0, lengths.sum(), spec.n)
    edges = np.concatenate([[0.0], np.cumsum(lengths)])
    idx = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(pieces) - 1)
    starts = np.array([a for a, _ in pieces])
    x = starts[idx] + (u - edges[idx])
    y = FUNCTIONS[spec.function](x)
    if spec.noise_std > 0:
        y = y + spec.noise_std * rng.standard_normal(spec.n)
    return x, y


def trig_normalize(x, domain) -> np.ndarray:
    """Map the domain affinely onto [0, pi] and return rows [sin t, cos t]."""
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ConfigError(f"degenerate domain {domain}")
    t = np.pi * (np.asarray(x, dtype=np.float64).ravel() - lo) / (hi - lo)
    return np.column_stack([np.sin(t), np.cos(t)])


# ---------------------------------------------------------------- config

_TRAIN_KEYS = {"learning_rate", "patience", "max_epochs", "adam_beta1", "adam_beta2", "adam_eps", "seed", "optimizer"}

DEFAULTS = {
    "dataset": {
        "function": "sinusoid",
        "domain": [-2.0, 2.0],
        "gap": [-0.5, 0.5],
        "n": 30,
        "noise_std": 0.1,
        "seed": 0,
    },
    "mlp": {
        "hidden_sizes": [512, 512],
        "softplus_beta": 87.09,
        "output_scale": 3.5,
        "sigma_w": 1.0,
        "sigma_b": 1.0,
        "seed": 0,
    },
    "beta_n": None,
    "mode": "full",
    "mean_train": {"learning_rate": 1e-4, "patience": 500, "max_epochs": 20000, "seed": 0, "optimizer": "adam"},
    "cov_train": {"learning_rate": 5e-5, "patience": 500, "max_epochs": 20000, "seed": 1, "optimizer": "adam"},
    "k": 5,
    "k_prime": 0,
    "svd_method": "dense",
    "workers": 1,
    "grid": {"min": -3.0, "max": 3.0, "count": 201},
    "output_dir": "runs/figure1",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a table")
            allowed = _TRAIN_KEYS if key in ("mean_train", "cov_train") else base[key].keys()
            for sub in value:
                if sub not in allowed:
                    raise ConfigError(f"unknown config key '{where}.{sub}'")
            merged = dict(out[key])
            merged.update(copy.deepcopy(value))
            out[key] = merged
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(value)
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    mlp_config: MLPConfig
    mean_train: TrainConfig
    cov_train: TrainConfig
    mode: str
    k: int
    k_prime: int
    svd_method: str
    workers: int
    grid: tuple[float, float, int]
    output_dir: Path | None
    resolved: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def sigma2(self) -> float:
        return self.dataset.n * self.mean_train.beta_n

    def grid_points(self) -> np.ndarray:
        lo, hi, count = self.grid
        return np.linspace(lo, hi, count)

    @classmethod
    def from_dict(cls, raw: dict | None = None) -> ExperimentConfig:
        """Validate ``raw`` against the defaults; unknown keys are errors."""
        d = _merge(DEFAULTS, raw or {})
        try:
            ds = d["dataset"]
            dataset = DatasetSpec(
                function=ds["function"],
                domain=tuple(float(v) for v in ds["domain"]),
                gap=None if ds["gap"] is None else tuple(float(v) for v in ds["gap"]),
                n=int(ds["n"]),
                noise_std=float(ds["noise_std"]),
                seed=int(ds["seed"]),
            )
            m = d["mlp"]
            mlp = MLPConfig(
                layer_sizes=(2, *(int(h) for h in m["hidden_sizes"]), 1),
                softplus_beta=float(m["softplus_beta"]),
                output_scale=float(m["output_scale"]),
                sigma_w=float(m["sigma_w"]),
                sigma_b=float(m["sigma_b"]),
                seed=int(m["seed"]),
            )
            beta_n = d["beta_n"]
            if beta_n is None:
                beta_n = dataset.noise_std**2 / dataset.n
            beta_n = float(beta_n)
            d["beta_n"] = beta_n
            mean_train = TrainConfig(beta_n=beta_n, **d["mean_train"])
            cov_train = TrainConfig(beta_n=beta_n, **d["cov_train"])
            g = d["grid"]
            grid = (float(g["min"]), float(g["max"]), int(g["count"]))
        except (TypeError, ValueError, KeyError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err
        if d["mode"] not in ("full", "linearized"):
            raise ConfigError("mode must be 'full' or 'linearized'")
        if d["svd_method"] not in ("dense", "matrix_free"):
            raise ConfigError("svd_method must be 'dense' or 'matrix_free'")
        k, k_prime = int(d["k"]), int(d["k_prime"])
        if not 1 <= k <= dataset.n:
            raise ConfigError(f"k must lie in [1, {dataset.n}]")
        if k_prime < 0:
            raise ConfigError("k_prime must be non-negative")
        if grid[2] < 2 or not grid[1] > grid[0]:
            raise ConfigError("grid needs count >= 2 and max > min")
        if int(d["workers"]) < 1:
            raise ConfigError("workers must be >= 1")
        out = None if d["output_dir"] is None else Path(d["output_dir"])
        return cls(dataset, mlp, mean_train, cov_train, d["mode"], k, k_prime, d["svd_method"],
                   int(d["workers"]), grid, out, resolved=d)

    @classmethod
    def load(cls, path=None, overrides=()) -> ExperimentConfig:
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: {err}") from err
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(apply_overrides(raw, overrides))


# ---------------------------------------------------------------- pipeline


@dataclass
class ComparisonReport:
    x: np.ndarray
    analytic_mean: np.ndarray
    analytic_std: np.ndarray
    ub_full_std: np.ndarray
    ub_k_std: np.ndarray
    gd_mean: np.ndarray
    gd_std: np.ndarray
    metrics: dict
    x_train: np.ndarray
    y_train: np.ndarray
    k: int
    resolved_config: dict

    def columns(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in CURVE_COLUMNS]


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        log.info("stage %s", name)
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as err:
            raise StageError(name, err) from err
        self.timings[name] = time.perf_counter() - start
        return out


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def ordering_violations(exact_std, ub_full_std, ub_k_std, slack=ORDER_SLACK) -> tuple[int, int]:
    lower = int(np.count_nonzero(exact_std > ub_full_std + slack))
    upper = int(np.count_nonzero(ub_full_std > ub_k_std + slack))
    return lower, upper


def analytic_stage(cfg: ExperimentConfig, stages: _Stages | None = None):
    """Dataset, theta0, kernels and the three analytic panels (no training)."""
    stages = stages or _Stages()
    if cfg.sigma2 <= 0:
        raise ConfigError("beta_n must be positive for the covariance panels")
    x_raw, y = stages.run("dataset", make_dataset, cfg.dataset)
    grid = cfg.grid_points()
    x = trig_normalize(x_raw, cfg.dataset.domain)
    xq = trig_normalize(grid, cfg.dataset.domain)
    theta0 = stages.run("init", nn_core.init_params, cfg.mlp_config)

    def kernels():
        return build_kernels(nn_core.MLPJacobian(theta0, x, cfg.mlp_config),
                             nn_core.MLPJacobian(theta0, xq, cfg.mlp_config))

    kb = stages.run("jacobians", kernels)
    n = len(y)
    post = stages.run("analytic", analytic_posterior, kb, y, np.zeros(n), np.zeros(len(grid)), cfg.sigma2)
    exact, ub_full, ub_k = stages.run("upper_bounds", assemble_analytic_variants, kb, cfg.sigma2, cfg.k)
    return dict(x_raw=x_raw, y=y, grid=grid, x=x, xq=xq, theta0=theta0, kernels=kb,
                mean=post.mean, exact=exact, ub_full=ub_full, ub_k=ub_k)


def run_figure1(cfg: ExperimentConfig, emit: bool = True) -> ComparisonReport:
    """Analytic posterior, both upper bounds, a trained mean head and a predictor bank.

    With ``emit`` and a configured output directory, the resolved config is written
    first and the artifacts last; a failing stage raises ``StageError`` and leaves
    already written files in place.
    """
    stages = _Stages()
    if emit and cfg.output_dir is not None:
        write_config(cfg, cfg.output_dir)
    a = analytic_stage(cfg, stages)
    mean_head = stages.run("fit_mean", train_posterior_mean, a["x"], a["y"], a["theta0"],
                           cfg.mlp_config, cfg.mean_train, mode=cfg.mode)
    gd_mean = stages.run("query_mean", query_posterior_mean, mean_head, a["xq"], cfg.mlp_config)
    bank = stages.run("fit_cov", train_posterior_covariance, a["x"], cfg.k, cfg.k_prime, a["theta0"],
                      cfg.mlp_config, cfg.cov_train, svd_method=cfg.svd_method, mode=cfg.mode,
                      workers=cfg.workers)
    est = stages.run("query_cov", query_posterior_covariance, bank, a["xq"], cfg.mlp_config)

    exact_std, _ = reported_std(a["exact"])
    full_std, _ = reported_std(a["ub_full"])
    k_std, _ = reported_std(a["ub_k"])
    gd_std, clamped = reported_std(est.cov)
    truth = FUNCTIONS[cfg.dataset.function](a["grid"])
    lower, upper = ordering_violations(exact_std, full_std, k_std)
    metrics = {
        "n_train": int(len(a["y"])),
        "n_grid": int(len(a["grid"])),
        "sigma2": cfg.sigma2,
        "k": cfg.k,
        "k_prime": cfg.k_prime,
        "mean_rmse": _rmse(gd_mean, a["mean"]),
        "mean_rmse_over_target_std": _rmse(gd_mean, a["mean"]) / float(np.std(truth)),
        "analytic_mean_rmse_vs_truth": _rmse(a["mean"], truth),
        "std_rmse_ub_full": _rmse(full_std, exact_std),
        "std_rmse_ub_k": _rmse(k_std, exact_std),
        "std_rmse_gd_vs_exact": _rmse(gd_std, exact_std),
        "std_rmse_gd_vs_ub_k": _rmse(gd_std, k_std),
        "violations_exact_le_ub_full": lower,
        "violations_ub_full_le_ub_k": upper,
        "gd_std_clamped": clamped,
        "mean_head_epochs": mean_head.epochs_run,
        "mean_head_loss": mean_head.final_loss,
        "cov_head_epochs_max": max(h.epochs_run for h in bank.eigen_heads + bank.noise_heads),
    }
    metrics.update({f"seconds_{name}": t for name, t in stages.timings.items()})
    report = ComparisonReport(
        a["grid"], a["mean"], exact_std, full_std, k_std, gd_mean, gd_std, metrics,
        a["x_raw"], a["y"], cfg.k, cfg.resolved,
    )
    if emit and cfg.output_dir is not None:
        stages.run("artifacts", emit_artifacts, report, cfg.output_dir)
    return report


# ---------------------------------------------------------------- artifacts


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_config(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.resolved, indent=2, sort_keys=True) + "\n")
    return path


def write_curves(path, header, columns) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])
    return path


def read_curves(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
    return {name: body[:, i] for i, name in enumerate(header)}


def emit_artifacts(report: ComparisonReport, out_dir) -> list[Path]:
    """curves.csv, summary.json and one SVG per panel; existing files are overwritten."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [write_curves(out / "curves.csv", CURVE_COLUMNS, report.columns())]
    summary = out / "summary.json"
    summary.write_text(json.dumps(report.metrics, indent=2, sort_keys=True) + "\n")
    files.append(summary)
    panels = [
        ("panel_analytic.svg", "Analytic posterior", report.analytic_mean, report.analytic_std),
        ("panel_ub_full.svg", "Upper bound, all eigenvectors", report.analytic_mean, report.ub_full_std),
        ("panel_ub_k.svg", f"Upper bound, {report.k} eigenvectors", report.analytic_mean, report.ub_k_std),
        ("panel_gd.svg", "Gradient descent", report.gd_mean, report.gd_std),
    ]
    # shared axes so the panels compare at a glance
    spans = [m + s * 2 for _, _, m, s in panels] + [m - s * 2 for _, _, m, s in panels] + [report.y_train]
    y_lo = float(min(np.min(v) for v in spans))
    y_hi = float(max(np.max(v) for v in spans))
    for name, title, mean, std in panels:
        text = panel_svg(report.x, mean, std, report.x_train, report.y_train, title, (y_lo, y_hi))
        path = out / name
        path.write_text(text)
        files.append(path)
    return files


def panel_svg(x, mean, std, x_train, y_train, title, y_range=None, width=480, height=320) -> str:
    """Static SVG: mean line, +-2 std band and training points."""
    pad_l, pad_r, pad_t, pad_b = 48, 12, 28, 32
    x0, x1 = float(np.min(x)), float(np.max(x))
    lo, hi = y_range if y_range is not None else (float(np.min(mean - 2 * std)), float(np.max(mean + 2 * std)))
    if not hi > lo:
        lo, hi = lo - 1, hi + 1
    margin = 0.05 * (hi - lo)
    lo, hi = lo - margin, hi + margin

    def px(v):
        return pad_l + (np.asarray(v) - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def py(v):
        return height - pad_b - (np.asarray(v) - lo) / (hi - lo) * (height - pad_t - pad_b)

    def pts(xs, ys):
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(xs), py(ys)))

    band = pts(np.concatenate([x, x[::-1]]), np.concatenate([mean + 2 * std, (mean - 2 * std)[::-1]]))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<title>{_escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{width - pad_l - pad_r}" height="{height - pad_t - pad_b}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_escape(title)}</text>',
        f'<polygon points="{band}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>',
        f'<polyline points="{pts(x, mean)}" fill="none" stroke="#1f3f7a" stroke-width="1.5"/>',
    ]
    for tx in _ticks(x0, x1):
        lines.append(f'<text x="{float(px(tx)):.2f}" y="{height - pad_b + 14}" text-anchor="middle">{tx:g}</text>')
    for ty in _ticks(lo, hi):
        lines.append(f'<text x="{pad_l - 4}" y="{float(py(ty)) + 4:.2f}" text-anchor="end">{ty:g}</text>')
    for a, b in zip(px(x_train), py(y_train)):
        lines.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="#c44e52"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _ticks(lo, hi, target=5):
    step = 10 ** math.floor(math.log10((hi - lo) / target))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= target:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [round(start + i * step, 10) for i in range(int((hi - start) / step) + 1)]


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
