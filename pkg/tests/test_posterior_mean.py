import csv

import numpy as np
import pytest

from ntkgp.errors import DivergenceError, EmptyDatasetError, IncompatibleError
from ntkgp.gp_reference import analytic_posterior, build_kernels
from ntkgp.nn_core import MLPConfig, init_params, jacobian
from ntkgp.posterior_mean import (
    TrainConfig,
    minimize,
    query_posterior_mean,
    train_posterior_mean,
)


@pytest.fixture(scope="module")
def setup():
    cfg = MLPConfig((2, 32, 32, 1), seed=3)
    theta0 = init_params(cfg)
    rng = np.random.default_rng(3)
    t = rng.uniform(0, np.pi, 10)
    x = np.column_stack([np.sin(t), np.cos(t)])
    tq = np.linspace(-0.5, np.pi + 0.5, 15)
    xq = np.column_stack([np.sin(tq), np.cos(tq)])
    y = np.sin(2 * t)
    return cfg, theta0, x, y, xq


def gd_config(cfg, theta0, x, beta_n, **kw):
    """Plain GD at step 1/L, L the curvature of the linearized loss."""
    k = jacobian(theta0, x, cfg).gram(jacobian(theta0, x, cfg))
    lip = 2 * (np.linalg.eigvalsh(k)[-1] / len(x) + beta_n)
    return TrainConfig(learning_rate=1.0 / lip, beta_n=beta_n, optimizer="gd", **kw)


def closed_form_mean(cfg, theta0, x, y, xq, beta_n):
    kb = build_kernels(jacobian(theta0, x, cfg), jacobian(theta0, xq, cfg))
    n = len(x)
    return analytic_posterior(kb, y, np.zeros(n), np.zeros(len(xq)), n * beta_n).mean


def test_zero_targets_stay_at_init(setup):
    cfg, theta0, x, _, xq = setup
    tc = TrainConfig(beta_n=0.01, patience=5, max_epochs=50)
    for mode in ("full", "linearized"):
        head = train_posterior_mean(x, np.zeros(len(x)), theta0, cfg, tc, mode=mode)
        # shifted targets equal f(x; theta0), so theta0 is already the minimizer
        assert head.final_loss == 0.0
        assert np.array_equal(head.theta_star.flat, theta0.flat)
        assert not query_posterior_mean(head, xq, cfg).any()


def test_linearized_gd_matches_closed_form(setup):
    cfg, theta0, x, y, xq = setup
    beta_n = 0.02
    tc = gd_config(cfg, theta0, x, beta_n, patience=200, max_epochs=200000)
    head = train_posterior_mean(x, y, theta0, cfg, tc, mode="linearized")
    est = query_posterior_mean(head, xq, cfg)
    ref = closed_form_mean(cfg, theta0, x, y, xq, beta_n)
    assert np.linalg.norm(est - ref) / np.linalg.norm(ref) <= 1e-3


def test_stronger_regularization_shrinks_fit(setup):
    cfg, theta0, x, y, _ = setup
    resid = []
    for beta_n in (0.001, 0.01, 0.1):
        tc = gd_config(cfg, theta0, x, beta_n, patience=200, max_epochs=100000)
        head = train_posterior_mean(x, y, theta0, cfg, tc, mode="linearized")
        resid.append(np.linalg.norm(query_posterior_mean(head, x, cfg) - y))
    assert resid[0] < resid[1] < resid[2]


def test_training_order_does_not_matter(setup):
    cfg, theta0, x, y, xq = setup
    tc = gd_config(cfg, theta0, x, 0.02, patience=50, max_epochs=3000)
    perm = np.random.default_rng(0).permutation(len(x))
    a = query_posterior_mean(train_posterior_mean(x, y, theta0, cfg, tc, mode="linearized"), xq, cfg)
    b = query_posterior_mean(train_posterior_mean(x[perm], y[perm], theta0, cfg, tc, mode="linearized"), xq, cfg)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_full_mode_reaches_stationary_point(setup):
    cfg, theta0, x, y, _ = setup
    tc = TrainConfig(learning_rate=1e-3, beta_n=0.01, patience=200, max_epochs=4000)
    head = train_posterior_mean(x, y, theta0, cfg, tc, mode="full")
    from ntkgp.nn_core import forward, loss_grad

    shifted = y + forward(theta0, x, cfg)
    loss0, grad0 = loss_grad(theta0, theta0, x, shifted, 0.01, cfg)
    loss, grad = loss_grad(head.theta_star, theta0, x, shifted, 0.01, cfg)
    assert loss == pytest.approx(head.final_loss, rel=1e-12)
    assert loss < 0.05 * loss0
    assert np.linalg.norm(grad) < 0.05 * np.linalg.norm(grad0)


def test_training_is_deterministic(setup):
    cfg, theta0, x, y, _ = setup
    tc = TrainConfig(learning_rate=1e-3, beta_n=0.01, patience=20, max_epochs=300)
    a = train_posterior_mean(x, y, theta0, cfg, tc)
    b = train_posterior_mean(x, y, theta0, cfg, tc)
    assert np.array_equal(a.theta_star.flat, b.theta_star.flat)
    assert a.epochs_run == b.epochs_run


def test_best_iterate_is_returned():
    # quadratic with a step that overshoots: loss oscillates and grows, best stays at start
    fn = lambda t: (float(t @ t), 2 * t)
    best, loss, epochs = minimize(fn, np.ones(3), TrainConfig(learning_rate=1.5, optimizer="gd", patience=5, max_epochs=100))
    assert np.array_equal(best, np.ones(3))
    assert loss == 3.0
    assert epochs == 6


def test_divergence_reports_epoch_and_rate(setup):
    cfg, theta0, x, y, _ = setup
    tc = TrainConfig(learning_rate=1e6, beta_n=0.01, optimizer="gd", patience=100, max_epochs=1000)
    with pytest.raises(DivergenceError) as info:
        train_posterior_mean(x, 100 * y, theta0, cfg, tc, mode="linearized")
    assert info.value.epoch > 1
    assert info.value.learning_rate == 1e6


def test_empty_dataset(setup):
    cfg, theta0, _, _, _ = setup
    with pytest.raises(EmptyDatasetError):
        train_posterior_mean(np.zeros((0, 2)), np.zeros(0), theta0, cfg, TrainConfig())


def test_query_with_other_config_rejected(setup):
    cfg, theta0, x, y, xq = setup
    head = train_posterior_mean(x, y, theta0, cfg, TrainConfig(patience=1, max_epochs=2))
    with pytest.raises(IncompatibleError):
        query_posterior_mean(head, xq, MLPConfig((2, 32, 32, 1), seed=4))


def test_log_file_written(setup, tmp_path):
    cfg, theta0, x, y, _ = setup
    path = tmp_path / "log" / "train.csv"
    head = train_posterior_mean(x, y, theta0, cfg, TrainConfig(patience=10, max_epochs=25), log_path=path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "loss", "grad_norm"]
    assert len(rows) == head.epochs_run + 1
    assert min(float(r[1]) for r in rows[1:]) == head.final_loss


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(beta_n=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
