"""Experiment drivers: seeding, outputs, manifests and reduced end-to-end runs."""

import dataclasses

import numpy as np
import pytest

from hiersim.config import ConfigError, GlacierConfig
from hiersim.discrepancy import REGION_INTERIOR, REGION_MARGIN, classify_regions, rw_residuals
from hiersim.experiments import (
    EXPERIMENTS,
    Manifest,
    epoch_site_means,
    observation_steps,
    region_covariance,
    residual_probe_indices,
    run_experiment,
    stage_rng,
    stage_seed,
    write_csv,
    write_failure_manifest,
)
from hiersim.sia import analytic_thickness, default_site_indices, solve_sia


def read_rows(path):
    """CSV rows as lists of strings, header first."""
    return [line.split(",") for line in path.read_text().splitlines()]


# ---------------------------------------------------------------------------
# seed derivation
# ---------------------------------------------------------------------------


def test_stage_seeds_are_stable_and_distinct():
    """The same (seed, label) always maps to the same stream; labels differ."""
    assert stage_seed(7, "observations") == stage_seed(7, "observations")
    assert stage_seed(7, "observations") != stage_seed(8, "observations")
    assert stage_seed(7, "observations") != stage_seed(7, "posterior")
    labels = ["observations", "posterior", "ess", "emulator", "bench:1"]
    seeds = {stage_seed(0, label) for label in labels}
    assert len(seeds) == len(labels)


def test_stage_rng_reproduces_draws():
    """Two generators for the same stage produce identical numbers."""
    a = stage_rng(3, "x").standard_normal(5)
    b = stage_rng(3, "x").standard_normal(5)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# shared numerics
# ---------------------------------------------------------------------------


def test_observation_steps_default_window(settings):
    """Epoch steps are multiples of the observation period."""
    steps = observation_steps(settings)
    assert steps.shape == (settings.n_epochs,)
    assert steps[0] == settings.obs_period_steps
    assert np.all(np.diff(steps) == settings.obs_period_steps)


def test_epoch_site_means_match_direct_solve(cfg, sites):
    """The sweep helper returns the solver thickness at steps and sites."""
    steps = np.array([5, 10])
    thetas = np.array([25.0, 40.0]) * 1e-25
    means = epoch_site_means(cfg, steps, sites, thetas)
    assert means.shape == (2, 2, sites.size)
    direct = solve_sia(cfg, 10, softness=float(thetas[1])).fields
    assert np.array_equal(means[1], direct[np.ix_(steps, sites)])


def test_weak_covariance_levels_margin_to_interior(cfg, settings, sites):
    """The weak variant rewrites only the margin block of the strong one."""
    strong = region_covariance(cfg, settings, sites, "strong").matrix
    weak = region_covariance(cfg, settings, sites, "weak").matrix
    labels = classify_regions(cfg)[sites]
    margin = labels == REGION_MARGIN
    interior = labels == REGION_INTERIOR
    assert margin.sum() > 0 and interior.sum() > 0
    dome, interior_var, margin_var = settings.region_variances
    assert np.allclose(np.diag(strong)[margin], margin_var, rtol=1e-6)
    assert np.allclose(np.diag(weak)[margin], interior_var, rtol=1e-6)
    assert np.allclose(np.diag(weak)[interior], interior_var, rtol=1e-6)
    # off-diagonal structure outside the margin block is untouched
    off_diag = ~np.eye(sites.size, dtype=bool)
    outside = np.outer(~margin, ~margin) & off_diag
    assert np.array_equal(strong[outside], weak[outside])
    with pytest.raises(ValueError, match="strong.*weak"):
        region_covariance(cfg, settings, sites, "medium")


def test_residual_probe_cells(cfg):
    """Default probes sit east and southeast of the dome; tiny grids fail."""
    interior, margin = residual_probe_indices(cfg)
    assert (interior, margin) == (222, 330)
    assert interior == 10 * cfg.nx + 12
    assert margin == 15 * cfg.nx + 15
    with pytest.raises(ConfigError, match="at least 11 rows and columns"):
        residual_probe_indices(GlacierConfig(nx=9, ny=9))


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def test_csv_cells_round_trip(tmp_path):
    """Floats use repr, bools lowercase words, rows end with newline only."""
    path = tmp_path / "out.csv"
    write_csv(path, ("a", "b", "c", "d"), [(1.0 / 3.0, 7, True, "text"), (0.1, -2, False, "x")])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.endswith(b"\n")
    lines = raw.decode().splitlines()
    assert lines[0] == "a,b,c,d"
    assert lines[1] == "0.3333333333333333,7,true,text"
    assert lines[2] == "0.1,-2,false,x"
    assert float(lines[1].split(",")[0]) == 1.0 / 3.0


def test_manifest_records_stages_and_failure():
    """The manifest shows the pipeline position when a run dies."""
    manifest = Manifest("demo", "cafebabe", 5, "solver", "exact")
    manifest.stage("observations")
    manifest.stage("posteriors")
    manifest.fail(ValueError("bad input"))
    assert manifest.status == "failed at stage 'posteriors': ValueError: bad input"
    fresh = Manifest("demo", "cafebabe", 5, "solver", "exact")
    fresh.fail(RuntimeError("boom"))
    assert fresh.status == "failed at stage 'startup': RuntimeError: boom"


def test_manifest_file_format(tmp_path):
    """Manifests are flat key = value text with a stage list and status."""
    manifest = Manifest("demo", "cafebabe", 5, "solver", "exact")
    manifest.stage("one")
    manifest.note("extra", 1.5)
    manifest.finish()
    manifest.write(tmp_path / "manifest.txt")
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert lines[0] == "hiersim run manifest"
    assert "experiment = demo" in lines
    assert "config_hash = cafebabe" in lines
    assert "seed = 5" in lines
    assert "extra = 1.5" in lines
    assert lines[-2] == "stages = one"
    assert lines[-1] == "status = ok"


def test_failure_manifest_written_without_experiment(tmp_path):
    """Failures before a run starts still leave a manifest behind."""
    write_failure_manifest(tmp_path, "table1", 3, "config", ConfigError("dt must be positive"))
    text = (tmp_path / "manifest.txt").read_text()
    assert "status = failed at stage 'config': ConfigError: dt must be positive" in text
    assert "experiment = table1" in text


# ---------------------------------------------------------------------------
# driver validation
# ---------------------------------------------------------------------------


def test_run_experiment_validates_choices(cfg, settings, tmp_path):
    """Unknown experiments, mean models and likelihoods are rejected early."""
    with pytest.raises(ValueError, match="unknown experiment 'tableX'"):
        run_experiment("tableX", cfg, settings, tmp_path, 0)
    with pytest.raises(ValueError, match="unknown mean model"):
        run_experiment("table1", cfg, settings, tmp_path, 0, mean_model="oracle")
    with pytest.raises(ValueError, match="unknown likelihood"):
        run_experiment("table1", cfg, settings, tmp_path, 0, likelihood="laplace")
    assert set(EXPERIMENTS) == {
        "table1",
        "table2",
        "table3",
        "residuals",
        "variance-field",
        "bench",
    }


def test_failed_run_leaves_manifest_and_reraises(cfg, settings, tmp_path):
    """A failing pipeline records its stage in the manifest, then propagates."""
    small = GlacierConfig(nx=9, ny=9)
    with pytest.raises(ConfigError, match="at least 11 rows"):
        run_experiment("residuals", small, settings, tmp_path, 0)
    text = (tmp_path / "manifest.txt").read_text()
    assert "status = failed at stage 'solver run': ConfigError" in text


# ---------------------------------------------------------------------------
# reduced end-to-end runs
# ---------------------------------------------------------------------------


def test_residual_experiment_outputs(cfg, settings, tmp_path):
    """The residual study writes one series per order plus the variances."""
    reduced = dataclasses.replace(settings, residual_steps=40)
    manifest = run_experiment("residuals", cfg, reduced, tmp_path, 9)
    assert manifest.status == "ok"
    names = {p.name for p in tmp_path.iterdir()}
    assert {f"residuals_q{q}.csv" for q in range(8)} <= names
    assert {"variance_by_order.csv", "manifest.txt"} <= names

    # the raw series equals the analytic-minus-solver discrepancy directly
    interior_idx, margin_idx = residual_probe_indices(cfg)
    traj = solve_sia(cfg, 40)
    radii = cfg.cell_radii()[[interior_idx, margin_idx]]
    rows = read_rows(tmp_path / "residuals_q0.csv")
    assert rows[0] == ["step", "site", "residual"]
    assert len(rows) == 1 + 40 * 2
    for step in (1, 17, 40):
        expect = analytic_thickness(radii, step * cfg.dt, cfg) - traj.fields[step, [interior_idx, margin_idx]]
        got_interior = float(rows[1 + (step - 1) * 2][2])
        got_margin = float(rows[2 + (step - 1) * 2][2])
        assert got_interior == expect[0]
        assert got_margin == expect[1]

    # differenced variances reproduce the library computation
    values = np.empty((40, 2))
    for j in range(1, 41):
        values[j - 1] = analytic_thickness(radii, j * cfg.dt, cfg) - traj.fields[j, [interior_idx, margin_idx]]
    vrows = read_rows(tmp_path / "variance_by_order.csv")
    assert vrows[0] == ["site", "cell", "order", "variance"]
    assert len(vrows) == 1 + 2 * 8
    from hiersim.discrepancy import residual_variance

    order1 = residual_variance(rw_residuals(values, 1), 1)
    by_key = {(r[0], int(r[2])): float(r[3]) for r in vrows[1:]}
    assert by_key[("interior", 1)] == pytest.approx(order1[0], rel=1e-12)
    assert by_key[("margin", 1)] == pytest.approx(order1[1], rel=1e-12)
    assert by_key[("interior", 0)] > by_key[("interior", 1)]


def test_variance_field_experiment_outputs(cfg, settings, tmp_path):
    """A short scale-field run writes the field, summaries and diagnostics."""
    reduced = dataclasses.replace(settings, n_epochs=2, ess_iterations=30, ess_burn_in=10)
    manifest = run_experiment("variance-field", cfg, reduced, tmp_path, 4)
    assert manifest.status == "ok"
    labels = classify_regions(cfg)
    n_glacier = int((labels != "exterior").sum())

    field_rows = read_rows(tmp_path / "variance_field.csv")
    assert field_rows[0] == ["cell", "x", "y", "region", "mean_variance", "mean_stdev"]
    assert len(field_rows) == 1 + n_glacier
    variances = np.array([float(r[4]) for r in field_rows[1:]])
    stdevs = np.array([float(r[5]) for r in field_rows[1:]])
    assert np.all(variances > 0)
    # the mean of squares dominates the square of the mean
    assert np.all(variances >= stdevs**2 - 1e-15)

    region_rows = read_rows(tmp_path / "region_summary.csv")
    assert region_rows[0] == ["region", "n_cells", "mean_variance", "mean_stdev"]
    assert [r[0] for r in region_rows[1:]] == ["dome", "interior", "margin"]
    assert sum(int(r[1]) for r in region_rows[1:]) == n_glacier

    norm_rows = read_rows(tmp_path / "normality.csv")
    assert norm_rows[0] == ["statistic", "p_value", "mean", "sd", "degenerate"]
    assert norm_rows[1][4] in ("true", "false")

    trace_rows = read_rows(tmp_path / "trace.csv")
    assert len(trace_rows) == 1 + 30 + 1


def test_rerun_is_byte_identical(cfg, settings, tmp_path):
    """The same seed and config rewrite every output file byte for byte."""
    reduced = dataclasses.replace(
        settings,
        n_epochs=2,
        grid_min=25.0,
        grid_max=35.0,
        grid_step=2.5,
        n_posterior_samples=2000,
    )
    run_experiment("table3", cfg, reduced, tmp_path / "a", 11)
    run_experiment("table3", cfg, reduced, tmp_path / "b", 11)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["manifest.txt", "posterior_approx.csv", "posterior_exact.csv", "summary.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = read_rows(tmp_path / "a" / "summary.csv")
    assert summary[0] == ["method", "min", "q1", "median", "mean", "q3", "max", "bias"]
    assert [r[0] for r in summary[1:]] == ["exact", "approx"]


def test_table1_compares_solver_and_emulator(cfg, settings, tmp_path):
    """The default mean model runs both the solver and the emulator sweep."""
    reduced = dataclasses.replace(
        settings,
        n_epochs=2,
        grid_min=25.0,
        grid_max=35.0,
        grid_step=2.5,
        train_min=20.0,
        train_max=60.0,
        train_step=10.0,
        rf_trees=15,
        n_posterior_samples=2000,
    )
    manifest = run_experiment("table1", cfg, reduced, tmp_path, 21)
    assert manifest.status == "ok"
    assert dict(manifest.entries)["mean_model"] == "both"
    assert {"posterior_solver.csv", "posterior_emulator.csv", "summary.csv"} <= {
        p.name for p in tmp_path.iterdir()
    }
    summary = read_rows(tmp_path / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["solver", "emulator"]
    medians = {r[0]: float(r[3]) for r in summary[1:]}
    # both posteriors live on the reduced grid around the generating value
    assert 25.0 <= medians["solver"] <= 35.0
    assert 25.0 <= medians["emulator"] <= 35.0
    posterior = read_rows(tmp_path / "posterior_solver.csv")
    assert posterior[0] == ["value", "weight"]
    weights = np.array([float(r[1]) for r in posterior[1:]])
    assert weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_bench_writes_timing_tables(cfg, settings, tmp_path):
    """The benchmark times three likelihood routes and both solver kernels."""
    manifest = run_experiment("bench", cfg, settings, tmp_path, 2)
    assert manifest.status == "ok"
    rows = read_rows(tmp_path / "bench.csv")
    assert rows[0] == ["method", "N", "m", "wall_time_ns", "loglik"]
    assert len(rows) == 1 + 12
    methods = [r[0] for r in rows[1:]]
    assert methods.count("exact-dense") == 4
    assert methods.count("exact-banded") == 4
    assert methods.count("approx") == 4
    assert [int(r[1]) for r in rows[1:]][:3] == [10, 10, 10]
    for row in rows[1:]:
        assert int(row[3]) > 0
        assert np.isfinite(float(row[4]))
    # exact-dense and exact-banded agree on the likelihood value at each N
    values = {(r[0], r[1]): float(r[4]) for r in rows[1:]}
    for n in ("10", "20", "40", "80"):
        assert values[("exact-dense", n)] == pytest.approx(values[("exact-banded", n)], rel=1e-8)

    kernel_rows = read_rows(tmp_path / "kernel_bench.csv")
    assert kernel_rows[0] == ["backend", "n_steps", "wall_time_ns"]
    backends = [r[0] for r in kernel_rows[1:]]
    assert len(backends) == 2
    assert set(backends) == {"numba", "numpy"}
