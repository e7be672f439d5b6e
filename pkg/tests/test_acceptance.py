"""End-to-end acceptance checks for the calibration pipeline.

Each test covers one headline requirement: likelihood correctness and
scaling, posterior reproduction with solver and emulator means, speedups,
residual reduction, covariance-choice effects, the variance-field pattern,
the random-walk law and bitwise determinism.  The heavy shared pieces (one
observation set, the full softness sweep, a production-size emulator) are
module fixtures so the whole file costs one sweep and one training run.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from hiersim.config import SOFTNESS_UNIT
from hiersim.discrepancy import (
    REGION_INTERIOR,
    REGION_MARGIN,
    rw_residuals,
    residual_variance,
    simulate_rw,
    squared_exponential,
)
from hiersim.emulator import emulate_sites, train_emulator
from hiersim.experiments import (
    epoch_site_means,
    region_covariance,
    residual_probe_indices,
    run_experiment,
)
from hiersim.inference import ess_variance_field, grid_posterior
from hiersim.likelihood import (
    approx_loglik,
    exact_loglik_banded,
    exact_loglik_dense,
    likelihood_inputs,
)
from hiersim.sia import ObservationSet, analytic_thickness, default_site_indices, generate_observations, solve_sia

TRUE_SOFTNESS_UNITS = 31.7


def median_seconds(func, *args, reps=5):
    """Median wall time over repeated calls, after one warm-up call."""
    func(*args)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        func(*args)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def observations(cfg, settings, sites):
    """One synthetic observation set on the default window."""
    return generate_observations(cfg, settings, np.random.default_rng(20260822), sites)


@pytest.fixture(scope="module")
def grid_units(settings):
    return settings.softness_grid()


@pytest.fixture(scope="module")
def sweep_means(cfg, sites, observations, grid_units):
    """Solver epoch means at every softness grid value."""
    return epoch_site_means(cfg, observations.epoch_steps, sites, grid_units * SOFTNESS_UNIT)


@pytest.fixture(scope="module")
def truth_means(cfg, sites, observations):
    """Solver epoch means at the generating softness."""
    return epoch_site_means(cfg, observations.epoch_steps, sites, cfg.ice_softness)[0]


@pytest.fixture(scope="module")
def strong_cov(cfg, settings, sites):
    return region_covariance(cfg, settings, sites, "strong")


@pytest.fixture(scope="module")
def solver_logliks(observations, sweep_means, strong_cov):
    """Banded exact log-likelihood of each grid value, solver means."""
    return np.array(
        [exact_loglik_banded(likelihood_inputs(observations, m, strong_cov)) for m in sweep_means]
    )


@pytest.fixture(scope="module")
def production_emulator(cfg, settings, observations):
    """Forest emulator at the production training settings."""
    return train_emulator(
        cfg,
        settings.training_grid() * SOFTNESS_UNIT,
        observations.epoch_steps,
        n_trees=settings.rf_trees,
        seed=0,
    )


@pytest.fixture(scope="module")
def emulator_logliks(observations, production_emulator, sites, strong_cov, grid_units):
    """Banded exact log-likelihood of each grid value, emulated means."""
    values = []
    for theta in grid_units * SOFTNESS_UNIT:
        means = emulate_sites(production_emulator, theta, sites)
        values.append(exact_loglik_banded(likelihood_inputs(observations, means, strong_cov)))
    return np.array(values)


def sample_posterior(grid, logliks, seed):
    return grid_posterior(grid, logliks, n_samples=1_000_000, rng=seed)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_banded_equals_dense():
    """Banded exact log-likelihood matches the dense oracle to 1e-8 relative."""
    rng = np.random.default_rng(12345)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        m = int(rng.integers(1, 11))
        a = rng.standard_normal((m, m))
        cov = a @ a.T + 0.3 * np.eye(m)
        sites = np.sort(rng.choice(441, size=m, replace=False))
        obs = ObservationSet(
            site_indices=sites,
            period_steps=int(rng.integers(1, 8)),
            noise_sd=float(10.0 ** rng.uniform(-1.0, 0.5)),
            values=rng.normal(2000.0, 50.0, (n, m)),
        )
        means = rng.normal(2000.0, 50.0, (n, m))
        inputs = likelihood_inputs(obs, means, cov)
        banded = exact_loglik_banded(inputs)
        dense = exact_loglik_dense(inputs)
        assert np.isclose(banded, dense, rtol=1e-8, atol=0.0)


def test_criterion_02_banded_scaling_beats_dense():
    """Doubling the epochs slows banded by < 3x while dense slows by > 5x."""
    rng = np.random.default_rng(2)
    m = 25
    a = rng.standard_normal((m, m))
    cov = a @ a.T + 0.5 * np.eye(m)
    sites = np.arange(m)
    times = {}
    for n in (40, 80):
        obs = ObservationSet(
            site_indices=sites,
            period_steps=5,
            noise_sd=1.0,
            values=rng.normal(2000.0, 50.0, (n, m)),
        )
        inputs = likelihood_inputs(obs, rng.normal(2000.0, 50.0, (n, m)), cov)
        times[("banded", n)] = median_seconds(exact_loglik_banded, inputs)
        times[("dense", n)] = median_seconds(exact_loglik_dense, inputs)
    banded_factor = times[("banded", 80)] / times[("banded", 40)]
    dense_factor = times[("dense", 80)] / times[("dense", 40)]
    assert banded_factor < 3.0
    assert dense_factor > 5.0


def test_criterion_03_posterior_means_with_both_mean_models(
    grid_units, solver_logliks, emulator_logliks
):
    """Solver and emulator posterior means land in their target windows."""
    solver_post = sample_posterior(grid_units, solver_logliks, 101)
    emulator_post = sample_posterior(grid_units, emulator_logliks, 102)
    assert abs(solver_post.summary["mean"] - 26.3) <= 3.0
    assert abs(emulator_post.summary["mean"] - 27.4) <= 3.0
    assert abs(solver_post.summary["median"] - emulator_post.summary["median"]) <= 2.0


def test_criterion_04_emulator_speedup(
    cfg, sites, observations, production_emulator, strong_cov
):
    """An emulated likelihood evaluation is at least 5x faster than a solver-backed one."""
    n_steps = int(observations.epoch_steps.max())

    def solver_route(theta):
        fields = solve_sia(cfg, n_steps, softness=theta).fields
        means = fields[np.ix_(observations.epoch_steps, sites)]
        return exact_loglik_banded(likelihood_inputs(observations, means, strong_cov))

    def emulator_route(theta):
        means = emulate_sites(production_emulator, theta, sites)
        return exact_loglik_banded(likelihood_inputs(observations, means, strong_cov))

    theta = 43.3 * SOFTNESS_UNIT
    solver_time = median_seconds(solver_route, theta, reps=3)
    emulator_time = median_seconds(emulator_route, theta, reps=3)
    assert solver_time / emulator_time >= 5.0


def test_criterion_05_approximate_posterior_has_wider_tails(
    observations, sweep_means, strong_cov, grid_units, solver_logliks
):
    """The approximate likelihood widens the posterior without moving its mean far."""
    approx_logliks = np.array(
        [approx_loglik(likelihood_inputs(observations, m, strong_cov)) for m in sweep_means]
    )
    exact_post = sample_posterior(grid_units, solver_logliks, 103)
    approx_post = sample_posterior(grid_units, approx_logliks, 104)
    exact_range = exact_post.summary["max"] - exact_post.summary["min"]
    approx_range = approx_post.summary["max"] - approx_post.summary["min"]
    assert approx_range > exact_range
    assert abs(approx_post.summary["mean"] - exact_post.summary["mean"]) <= 1.5


def test_criterion_06_first_differencing_shrinks_residuals(cfg):
    """Over 5000 steps, RW(1) residuals stay small while raw errors grow large.

    The probe cells sit in the interior and near the margin; the sample
    variance of the differenced residuals is smallest at order 5 at both.
    """
    interior_idx, margin_idx = residual_probe_indices(cfg)
    probes = np.array([interior_idx, margin_idx])
    n_steps = 5000
    traj = solve_sia(cfg, n_steps)
    radii = cfg.cell_radii()[probes]
    values = np.empty((n_steps, 2))
    for j in range(1, n_steps + 1):
        values[j - 1] = analytic_thickness(radii, j * cfg.dt, cfg) - traj.fields[j, probes]
    raw_max = np.abs(values).max(axis=0)
    rw1_max = np.abs(rw_residuals(values, 1)).max(axis=0)
    assert rw1_max[0] <= 0.1
    assert raw_max[0] > 1.0
    assert rw1_max[1] <= 0.5
    assert raw_max[1] > 10.0
    orders = np.arange(1, 8)
    variances = np.stack(
        [residual_variance(rw_residuals(values, q), q) for q in orders]
    )
    assert orders[np.argmin(variances[:, 0])] == 5
    assert orders[np.argmin(variances[:, 1])] == 5


def test_criterion_07_covariance_choice_orders_the_posteriors(
    cfg, settings, sites, observations, sweep_means, truth_means, grid_units, strong_cov
):
    """Weak covariance biases the posterior; the scale-field one widens it.

    Three posteriors share the observations and solver means and differ
    only in the spatial covariance: the strong region-blocked matrix, the
    weak one with the margin leveled down, and the matrix built from the
    fitted per-site scale field.
    """

    def posterior_for(cov, seed):
        lls = np.array(
            [exact_loglik_banded(likelihood_inputs(observations, m, cov)) for m in sweep_means]
        )
        return sample_posterior(grid_units, lls, seed)

    strong_post = sample_posterior(
        grid_units,
        np.array(
            [exact_loglik_banded(likelihood_inputs(observations, m, strong_cov)) for m in sweep_means]
        ),
        105,
    )
    weak_post = posterior_for(region_covariance(cfg, settings, sites, "weak"), 106)

    increments = np.diff(observations.values, axis=0) - np.diff(truth_means, axis=0)
    coords = cfg.cell_coordinates()[sites]
    corr = squared_exponential(coords, settings.ess_prior_lengthscale)
    corr += 1e-8 * np.eye(sites.size)
    sigma_v = settings.ess_prior_variance * corr
    field = ess_variance_field(
        increments,
        settings.ess_prior_log_mean,
        sigma_v,
        corr,
        iterations=settings.ess_iterations,
        burn_in=settings.ess_burn_in,
        rng_seed=0,
    )
    v = field.v_samples
    gp_cov = (v.T @ v / v.shape[0]) * corr
    gp_post = posterior_for(gp_cov, 107)

    strong_iqr = strong_post.summary["q3"] - strong_post.summary["q1"]
    gp_iqr = gp_post.summary["q3"] - gp_post.summary["q1"]
    assert strong_post.summary["min"] <= TRUE_SOFTNESS_UNITS <= strong_post.summary["max"]
    assert gp_iqr > strong_iqr
    assert weak_post.summary["max"] < TRUE_SOFTNESS_UNITS


def test_criterion_08_variance_field_pattern(cfg, settings, tmp_path):
    """The fitted scale field is largest at the margin and the scaled
    increments pass the normality check."""
    run_experiment("variance-field", cfg, settings, tmp_path, 0)
    region_rows = [
        line.split(",") for line in (tmp_path / "region_summary.csv").read_text().splitlines()
    ]
    by_region = {row[0]: float(row[2]) for row in region_rows[1:]}
    norm_rows = [
        line.split(",") for line in (tmp_path / "normality.csv").read_text().splitlines()
    ]
    normality = dict(zip(norm_rows[0], norm_rows[1]))
    assert by_region[REGION_MARGIN] > by_region[REGION_INTERIOR]
    assert abs(float(normality["mean"])) <= 0.2
    assert normality["degenerate"] == "false"
    assert float(normality["p_value"]) > 0.05


def test_criterion_09_random_walk_law():
    """Simulated RW(1) covariance matches min(a, b) Sigma within 5 percent."""
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    sigma = 0.7 * squared_exponential(coords, 1.2) + 0.05 * np.eye(3)
    n_steps, n_draws = 12, 30000
    rng = np.random.default_rng(31)
    draws = np.stack([simulate_rw(sigma, 1, n_steps, rng) for _ in range(n_draws)])
    for a, b in ((1, 1), (3, 7), (12, 12), (2, 9)):
        emp = draws[:, a - 1].T @ draws[:, b - 1] / n_draws
        expect = min(a, b) * sigma
        rel = np.abs(emp - expect).max() / np.abs(expect).max()
        assert rel <= 0.05


def test_criterion_10_reruns_are_thread_invariant(cfg, tmp_path):
    """Identical config and seed give identical CSVs at any thread count."""
    config = tmp_path / "reduced.cfg"
    config.write_text(
        "n_epochs = 4\n"
        "grid_min = 28\n"
        "grid_max = 34\n"
        "grid_step = 1.0\n"
        "ess_iterations = 50\n"
        "ess_burn_in = 10\n"
        "n_posterior_samples = 5000\n"
    )
    outputs = {}
    for threads in ("1", "4"):
        out = tmp_path / f"threads_{threads}"
        env = os.environ.copy()
        env["HIERSIM_NUM_THREADS"] = threads
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "hiersim.cli",
                "table2",
                "--config",
                str(config),
                "--out",
                str(out),
                "--seed",
                "3",
            ],
            capture_output=True,
            text=True,
            env=env,
            timeout=600,
        )
        assert proc.returncode == 0, proc.stderr
        outputs[threads] = {
            p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix == ".csv"
        }
    assert set(outputs["1"]) == set(outputs["4"])
    assert len(outputs["1"]) >= 4
    for name in outputs["1"]:
        assert outputs["1"][name] == outputs["4"][name], name
