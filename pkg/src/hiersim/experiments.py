"""Reproducible experiment drivers behind the command line interface.

Each experiment reads a configuration, derives every random stream from one
root seed, runs a stage pipeline and persists CSV outputs plus a plain-text
manifest into the chosen output directory.  Outputs are deterministic for a
given (config, seed) pair at any thread count; only the wall-time columns of
the benchmark experiment vary between runs.

Floats in CSVs are written with ``repr`` so values round-trip exactly, which
is what makes byte-for-byte reruns possible.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

import hiersim
from hiersim import _kernels
from hiersim.config import (
    SOFTNESS_UNIT,
    ConfigError,
    GlacierConfig,
    InferenceSettings,
    config_hash,
)
from hiersim.discrepancy import (
    REGION_DOME,
    REGION_EXTERIOR,
    REGION_INTERIOR,
    REGION_MARGIN,
    build_block_sigma,
    classify_regions,
    residual_variance,
    rw_residuals,
    squared_exponential,
)
from hiersim.emulator import emulate_sites, train_emulator
from hiersim.inference import (
    SUMMARY_FIELDS,
    ess_variance_field,
    grid_posterior,
    scaled_residual_normality,
)
from hiersim.likelihood import (
    approx_loglik,
    exact_loglik_banded,
    exact_loglik_dense,
    likelihood_inputs,
)
from hiersim.sia import (
    analytic_thickness,
    default_site_indices,
    generate_observations,
    solve_sia,
)

# Relative diagonal bump that keeps dense correlation matrices factorable.
_CORR_JITTER = 1e-8


# ---------------------------------------------------------------------------
# Seed derivation and shared numerics
# ---------------------------------------------------------------------------

def stage_seed(seed: int, label: str) -> int:
    """Deterministic per-stage integer seed derived from the root seed.

    Hashing the label keeps streams independent across stages and stable
    under reordering or insertion of stages, which a simple counter would
    not be.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stage_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for one named stage of an experiment."""
    return np.random.default_rng(stage_seed(seed, label))


def observation_steps(settings: InferenceSettings) -> np.ndarray:
    """Solver steps of the observation epochs, 1-based epoch times k."""
    return settings.obs_period_steps * np.arange(1, settings.n_epochs + 1)


def epoch_site_means(
    cfg: GlacierConfig,
    steps: np.ndarray,
    site_indices: np.ndarray,
    thetas_si: np.ndarray,
) -> np.ndarray:
    """Solver thickness at the given steps and sites for each softness value.

    Returns an array of shape (n_thetas, n_steps, n_sites); one solver run
    per parameter covers all requested steps.
    """
    steps = np.asarray(steps, dtype=np.intp)
    site_indices = np.asarray(site_indices, dtype=np.intp)
    thetas = np.atleast_1d(np.asarray(thetas_si, dtype=float))
    n_steps = int(steps.max())
    out = np.empty((thetas.size, steps.size, site_indices.size))
    for i, theta in enumerate(thetas):
        traj = solve_sia(cfg, n_steps, softness=float(theta))
        out[i] = traj.fields[np.ix_(steps, site_indices)]
    return out


def region_covariance(
    cfg: GlacierConfig,
    settings: InferenceSettings,
    site_indices: np.ndarray,
    kind: str,
):
    """Region-blocked spatial covariance over the given sites.

    ``region_variances`` is read as (dome, interior, margin).  The strong
    variant uses those values as configured; the weak variant levels the
    margin down to the interior variance, removing the extra freedom the
    error model needs near the ice edge.
    """
    if kind not in ("strong", "weak"):
        raise ValueError(f"covariance kind must be 'strong' or 'weak', got {kind!r}")
    dome, interior, margin = settings.region_variances
    if kind == "weak":
        margin = interior
    variances = {
        REGION_DOME: dome,
        REGION_INTERIOR: interior,
        REGION_MARGIN: margin,
        REGION_EXTERIOR: interior,
    }
    site_indices = np.asarray(site_indices, dtype=np.intp)
    labels = classify_regions(cfg)[site_indices]
    coords = cfg.cell_coordinates()[site_indices]
    return build_block_sigma(
        labels, variances, settings.region_lengthscale, coords, site_indices=site_indices
    )


def _se_correlation(coords: np.ndarray, lengthscale: float) -> np.ndarray:
    corr = squared_exponential(coords, lengthscale)
    return corr + _CORR_JITTER * np.eye(corr.shape[0])


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    """Write rows with full-precision floats and unix line endings."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_posterior(path: Path, grid: np.ndarray, weights: np.ndarray) -> None:
    write_csv(path, ("value", "weight"), zip(grid, weights))


def _write_trace(path: Path, trace: np.ndarray) -> None:
    write_csv(path, ("iteration", "log_posterior"), enumerate(trace))


def _summary_row(label: str, result, theta_true: float | None = None):
    row = [label] + [result.summary[key] for key in SUMMARY_FIELDS]
    if theta_true is not None:
        row.append(result.bias(theta_true))
    return row


class Manifest:
    """Deterministic plain-text record of one experiment run.

    The manifest names the experiment, the configuration digest, the root
    seed, the resolved model and likelihood choices, the kernel backend and
    library versions, then the pipeline stages reached and the final
    status.  It deliberately carries no timestamps or wall times so reruns
    produce identical files.
    """

    def __init__(
        self,
        experiment: str,
        config_digest: str,
        seed: int,
        mean_model: str,
        likelihood: str,
    ):
        self.entries: list[tuple[str, str]] = [
            ("experiment", experiment),
            ("config_hash", config_digest),
            ("seed", str(seed)),
            ("mean_model", mean_model),
            ("likelihood", likelihood),
            ("kernel_backend", _kernels.backend_name()),
            ("threads", os.environ.get("HIERSIM_NUM_THREADS", "default")),
        ]
        self.entries.extend(_library_versions())
        self.stages: list[str] = []
        self.status = "incomplete"

    def stage(self, name: str) -> None:
        """Mark entry into a stage; the last entry is the failure point."""
        self.stages.append(name)

    def note(self, key: str, value) -> None:
        self.entries.append((key, _cell(value)))

    def finish(self) -> None:
        self.status = "ok"

    def fail(self, exc: BaseException) -> None:
        stage = self.stages[-1] if self.stages else "startup"
        self.status = f"failed at stage '{stage}': {type(exc).__name__}: {exc}"

    def write(self, path: Path) -> None:
        lines = ["hiersim run manifest"]
        lines.extend(f"{key} = {value}" for key, value in self.entries)
        lines.append("stages = " + (", ".join(self.stages) if self.stages else "none"))
        lines.append(f"status = {self.status}")
        Path(path).write_text("\n".join(lines) + "\n")


def _library_versions() -> list[tuple[str, str]]:
    import scipy
    import sklearn

    entries = [
        ("hiersim_version", hiersim.__version__),
        ("numpy_version", np.__version__),
        ("scipy_version", scipy.__version__),
        ("sklearn_version", sklearn.__version__),
    ]
    try:
        import numba

        entries.append(("numba_version", numba.__version__))
    except ImportError:
        entries.append(("numba_version", "absent"))
    return entries


# ---------------------------------------------------------------------------
# Experiment pipelines
# ---------------------------------------------------------------------------

def _grid_sweep_loglik(obs, means, cov, evaluator) -> np.ndarray:
    """Log-likelihood of each candidate's epoch means against the observations."""
    return np.array(
        [evaluator(likelihood_inputs(obs, m, cov)) for m in means]
    )


def _train_default_emulator(cfg, settings, epochs, seed: int):
    return train_emulator(
        cfg,
        settings.training_grid() * SOFTNESS_UNIT,
        epochs,
        n_trees=settings.rf_trees,
        seed=stage_seed(seed, "emulator") % 2**30,
    )


def run_table1(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Solver-backed versus emulator-backed posterior for the softness.

    Both posteriors use the same observations, the same exact likelihood
    and the strong region covariance; the only difference is where the
    epoch means come from.
    """
    evaluator = exact_loglik_banded if likelihood == "exact" else approx_loglik
    manifest.stage("observations")
    sites = default_site_indices(cfg, settings.site_offsets)
    obs = generate_observations(cfg, settings, stage_rng(seed, "observations"), sites)
    cov = region_covariance(cfg, settings, sites, "strong")
    grid_units = settings.softness_grid()
    grid_si = grid_units * SOFTNESS_UNIT
    theta_true = cfg.ice_softness / SOFTNESS_UNIT
    summary_rows = []

    if mean_model in ("solver", "both"):
        manifest.stage("solver sweep")
        means = epoch_site_means(cfg, obs.epoch_steps, sites, grid_si)
        lls = _grid_sweep_loglik(obs, means, cov, evaluator)
        manifest.stage("solver posterior")
        post = grid_posterior(
            grid_units,
            lls,
            n_samples=settings.n_posterior_samples,
            rng=stage_rng(seed, "posterior:solver"),
        )
        _write_posterior(out / "posterior_solver.csv", grid_units, post.weights)
        summary_rows.append(_summary_row("solver", post, theta_true))

    if mean_model in ("emulator", "both"):
        manifest.stage("emulator training")
        model = _train_default_emulator(cfg, settings, obs.epoch_steps, seed)
        manifest.stage("emulator sweep")
        means = np.stack([emulate_sites(model, theta, sites) for theta in grid_si])
        lls = _grid_sweep_loglik(obs, means, cov, evaluator)
        manifest.stage("emulator posterior")
        post = grid_posterior(
            grid_units,
            lls,
            n_samples=settings.n_posterior_samples,
            rng=stage_rng(seed, "posterior:emulator"),
        )
        _write_posterior(out / "posterior_emulator.csv", grid_units, post.weights)
        summary_rows.append(_summary_row("emulator", post, theta_true))

    manifest.stage("outputs")
    write_csv(
        out / "summary.csv",
        ("method",) + SUMMARY_FIELDS + ("bias",),
        summary_rows,
    )


def run_table2(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Posterior under three spatial covariances: fitted field, strong, weak.

    The fitted variant estimates a per-site scale field from the residual
    increments the analyst can actually form (observed epoch-to-epoch
    increments minus the model's increments at the true softness), then
    plugs the posterior-mean covariance into the likelihood.
    """
    evaluator = exact_loglik_banded if likelihood == "exact" else approx_loglik
    manifest.stage("observations")
    sites = default_site_indices(cfg, settings.site_offsets)
    obs = generate_observations(cfg, settings, stage_rng(seed, "observations"), sites)
    grid_units = settings.softness_grid()
    grid_si = grid_units * SOFTNESS_UNIT
    theta_true = cfg.ice_softness / SOFTNESS_UNIT

    if mean_model == "emulator":
        manifest.stage("emulator training")
        model = _train_default_emulator(cfg, settings, obs.epoch_steps, seed)
        manifest.stage("mean sweep")
        means = np.stack([emulate_sites(model, theta, sites) for theta in grid_si])
        truth_means = emulate_sites(model, cfg.ice_softness, sites)
    else:
        manifest.stage("mean sweep")
        means = epoch_site_means(cfg, obs.epoch_steps, sites, grid_si)
        truth_means = epoch_site_means(cfg, obs.epoch_steps, sites, cfg.ice_softness)[0]

    manifest.stage("scale field fit")
    if obs.n_epochs < 2:
        raise ConfigError("the fitted covariance needs at least two observation epochs")
    increments = np.diff(obs.values, axis=0) - np.diff(truth_means, axis=0)
    coords = cfg.cell_coordinates()[sites]
    corr = _se_correlation(coords, settings.ess_prior_lengthscale)
    sigma_v = settings.ess_prior_variance * _se_correlation(
        coords, settings.ess_prior_lengthscale
    )
    field = ess_variance_field(
        increments,
        settings.ess_prior_log_mean,
        sigma_v,
        corr,
        iterations=settings.ess_iterations,
        burn_in=settings.ess_burn_in,
        rng_seed=stage_seed(seed, "ess"),
    )
    v = field.v_samples
    sigma_bar = (v.T @ v / v.shape[0]) * corr
    _write_trace(out / "trace.csv", field.trace)

    manifest.stage("posteriors")
    summary_rows = []
    for name, cov in (
        ("gp", sigma_bar),
        ("strong", region_covariance(cfg, settings, sites, "strong")),
        ("weak", region_covariance(cfg, settings, sites, "weak")),
    ):
        lls = _grid_sweep_loglik(obs, means, cov, evaluator)
        post = grid_posterior(
            grid_units,
            lls,
            n_samples=settings.n_posterior_samples,
            rng=stage_rng(seed, f"posterior:{name}"),
        )
        _write_posterior(out / f"posterior_{name}.csv", grid_units, post.weights)
        summary_rows.append(_summary_row(name, post, theta_true))

    manifest.stage("outputs")
    write_csv(
        out / "summary.csv",
        ("sigma",) + SUMMARY_FIELDS + ("bias",),
        summary_rows,
    )


def run_table3(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Exact versus approximate likelihood on one set of observations."""
    manifest.stage("observations")
    sites = default_site_indices(cfg, settings.site_offsets)
    obs = generate_observations(cfg, settings, stage_rng(seed, "observations"), sites)
    cov = region_covariance(cfg, settings, sites, "strong")
    grid_units = settings.softness_grid()
    grid_si = grid_units * SOFTNESS_UNIT
    theta_true = cfg.ice_softness / SOFTNESS_UNIT

    if mean_model == "emulator":
        manifest.stage("emulator training")
        model = _train_default_emulator(cfg, settings, obs.epoch_steps, seed)
        manifest.stage("mean sweep")
        means = np.stack([emulate_sites(model, theta, sites) for theta in grid_si])
    else:
        manifest.stage("mean sweep")
        means = epoch_site_means(cfg, obs.epoch_steps, sites, grid_si)

    manifest.stage("posteriors")
    summary_rows = []
    for name, evaluator in (("exact", exact_loglik_banded), ("approx", approx_loglik)):
        lls = _grid_sweep_loglik(obs, means, cov, evaluator)
        post = grid_posterior(
            grid_units,
            lls,
            n_samples=settings.n_posterior_samples,
            rng=stage_rng(seed, f"posterior:{name}"),
        )
        _write_posterior(out / f"posterior_{name}.csv", grid_units, post.weights)
        summary_rows.append(_summary_row(name, post, theta_true))

    manifest.stage("outputs")
    write_csv(
        out / "summary.csv",
        ("method",) + SUMMARY_FIELDS + ("bias",),
        summary_rows,
    )


def residual_probe_indices(cfg: GlacierConfig) -> tuple[int, int]:
    """Flat indices of the interior and margin residual probe cells.

    The probes sit two columns east of the dome centre (about 27 percent of
    the margin radius on the default grid) and five rows plus five columns
    out (about 94 percent), one cell well inside the ice and one near the
    front, where the error behaves worst.  Grids too small to hold them are
    rejected.
    """
    ci = (cfg.ny - 1) // 2
    cj = (cfg.nx - 1) // 2
    interior = (ci, cj + 2)
    margin = (ci + 5, cj + 5)
    for i, j in (interior, margin):
        if not (0 <= i < cfg.ny and 0 <= j < cfg.nx):
            raise ConfigError(
                f"residual probe cell ({i}, {j}) falls outside the "
                f"{cfg.ny} x {cfg.nx} grid; the probes need at least 11 rows "
                "and columns"
            )
    return interior[0] * cfg.nx + interior[1], margin[0] * cfg.nx + margin[1]


def run_residuals(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Random-walk residual series at an interior and a margin probe cell.

    Emits the solver-vs-truth discrepancy differenced at orders 0 through 7
    (order 0 is the raw series) plus the per-order sample variances with
    warm-up rows excluded.  The experiment is deterministic; the seed only
    enters the manifest.
    """
    manifest.stage("solver run")
    interior_idx, margin_idx = residual_probe_indices(cfg)
    probe_sites = np.array([interior_idx, margin_idx], dtype=np.intp)
    n_steps = settings.residual_steps
    traj = solve_sia(cfg, n_steps)
    radii = cfg.cell_radii()[probe_sites]
    values = np.empty((n_steps, probe_sites.size))
    for j in range(1, n_steps + 1):
        values[j - 1] = analytic_thickness(radii, j * cfg.dt, cfg) - traj.fields[j, probe_sites]

    manifest.stage("residual series")
    site_names = ("interior", "margin")
    variance_rows = []
    steps = np.arange(1, n_steps + 1)
    for order in range(0, 8):
        residuals = rw_residuals(values, order)
        rows = (
            (steps[t], site_names[s], residuals[t, s])
            for t in range(n_steps)
            for s in range(probe_sites.size)
        )
        write_csv(out / f"residuals_q{order}.csv", ("step", "site", "residual"), rows)
        variances = residual_variance(residuals, order)
        for s, name in enumerate(site_names):
            variance_rows.append((name, int(probe_sites[s]), order, variances[s]))

    manifest.stage("outputs")
    write_csv(
        out / "variance_by_order.csv",
        ("site", "cell", "order", "variance"),
        variance_rows,
    )
    manifest.note("interior_cell", interior_idx)
    manifest.note("margin_cell", margin_idx)


def run_variance_field(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Posterior scale field of the solver error over the glacier cells.

    The data are the noise-free epoch-to-epoch increments of the
    analytic-minus-solver discrepancy over the observation window at every
    on-ice cell.  The prior level for the log field is set from the pooled
    increment spread; a fixed level of log(1) sits many prior standard
    deviations from fields of this magnitude and the pinned chain length
    cannot bridge that gap.
    """
    manifest.stage("solver run")
    steps = observation_steps(settings)
    n_steps = int(steps.max())
    traj = solve_sia(cfg, n_steps)
    labels = classify_regions(cfg)
    glacier = np.flatnonzero(labels != REGION_EXTERIOR)
    radii = cfg.cell_radii()[glacier]
    levels = np.empty((steps.size, glacier.size))
    for row, step in enumerate(steps):
        exact = analytic_thickness(radii, step * cfg.dt, cfg)
        levels[row] = exact - traj.fields[step, glacier]
    increments = np.diff(np.vstack([np.zeros((1, glacier.size)), levels]), axis=0)

    manifest.stage("scale field fit")
    pooled_sd = float(increments.std())
    if pooled_sd <= 0:
        raise ConfigError("discrepancy increments are identically zero; nothing to fit")
    mu_v = float(np.log(pooled_sd))
    coords = cfg.cell_coordinates()[glacier]
    corr = _se_correlation(coords, settings.ess_prior_lengthscale)
    sigma_v = settings.ess_prior_variance * _se_correlation(
        coords, settings.ess_prior_lengthscale
    )
    field = ess_variance_field(
        increments,
        mu_v,
        sigma_v,
        corr,
        iterations=settings.ess_iterations,
        burn_in=settings.ess_burn_in,
        rng_seed=stage_seed(seed, "ess"),
    )
    manifest.note("pooled_increment_sd", pooled_sd)
    manifest.note("prior_log_mean", mu_v)

    manifest.stage("normality check")
    mean_variance = field.mean_variance()
    mean_stdev = field.mean_stdev()
    normality = scaled_residual_normality(increments[-1], mean_variance)

    manifest.stage("outputs")
    xy = cfg.cell_coordinates()[glacier]
    write_csv(
        out / "variance_field.csv",
        ("cell", "x", "y", "region", "mean_variance", "mean_stdev"),
        (
            (int(glacier[i]), xy[i, 0], xy[i, 1], labels[glacier[i]],
             mean_variance[i], mean_stdev[i])
            for i in range(glacier.size)
        ),
    )
    region_rows = []
    for region in (REGION_DOME, REGION_INTERIOR, REGION_MARGIN):
        mask = labels[glacier] == region
        region_rows.append(
            (
                region,
                int(mask.sum()),
                float(mean_variance[mask].mean()),
                float(mean_stdev[mask].mean()),
            )
        )
    write_csv(
        out / "region_summary.csv",
        ("region", "n_cells", "mean_variance", "mean_stdev"),
        region_rows,
    )
    write_csv(
        out / "normality.csv",
        ("statistic", "p_value", "mean", "sd", "degenerate"),
        [
            (
                normality.statistic,
                normality.p_value,
                normality.mean,
                normality.sd,
                normality.degenerate,
            )
        ],
    )
    _write_trace(out / "trace.csv", field.trace)


def _median_time_ns(func, *args, reps: int = 3):
    """Median wall time of repeated calls, after one warm-up call.

    Returns (last value, median nanoseconds).
    """
    value = func(*args)
    times = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        value = func(*args)
        times.append(time.perf_counter_ns() - start)
    return value, int(np.median(times))


def _foreign_kernel_timing(cfg: GlacierConfig, n_steps: int, reps: int):
    """Time the solver kernel under the other backend in a subprocess.

    Returns (backend name, median nanoseconds) or None when the subprocess
    fails, for instance when the JIT backend is requested but unavailable.
    """
    kwargs = dataclasses.asdict(cfg)
    code = (
        "import time\n"
        "import numpy as np\n"
        "from hiersim import _kernels\n"
        "from hiersim.config import GlacierConfig\n"
        "from hiersim.sia import solve_sia\n"
        f"cfg = GlacierConfig(**{kwargs!r})\n"
        f"n_steps = {n_steps}\n"
        "solve_sia(cfg, n_steps)\n"
        "times = []\n"
        f"for _ in range({reps}):\n"
        "    start = time.perf_counter_ns()\n"
        "    solve_sia(cfg, n_steps)\n"
        "    times.append(time.perf_counter_ns() - start)\n"
        "print(_kernels.backend_name(), int(np.median(times)))\n"
    )
    env = os.environ.copy()
    if _kernels.NUMBA_ENABLED:
        env["HIERSIM_NO_NUMBA"] = "1"
    else:
        env.pop("HIERSIM_NO_NUMBA", None)
    try:
        proc = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True,
            text=True,
            env=env,
            timeout=600,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if proc.returncode != 0:
        return None
    parts = proc.stdout.split()
    if len(parts) != 2:
        return None
    return parts[0], int(parts[1])


def run_bench(cfg, settings, out, seed, manifest, mean_model, likelihood):
    """Wall-time comparison of the likelihood routes and the solver backends.

    ``bench.csv`` times the dense exact, banded exact and approximate
    log-likelihoods as the number of observation epochs doubles;
    ``kernel_bench.csv`` compares the JIT and numpy solver kernels on the
    observation window.  Timing columns vary from run to run; everything
    else is deterministic.
    """
    manifest.stage("likelihood timings")
    sites = default_site_indices(cfg, settings.site_offsets)
    cov = region_covariance(cfg, settings, sites, "strong")
    rows = []
    for n_epochs in (10, 20, 40, 80):
        sub = dataclasses.replace(settings, n_epochs=n_epochs)
        obs = generate_observations(
            cfg, sub, stage_rng(seed, f"bench:observations:{n_epochs}"), sites
        )
        means = epoch_site_means(
            cfg, obs.epoch_steps, sites, cfg.ice_softness
        )[0]
        inputs = likelihood_inputs(obs, means, cov)
        for method, func in (
            ("exact-dense", exact_loglik_dense),
            ("exact-banded", exact_loglik_banded),
            ("approx", approx_loglik),
        ):
            value, elapsed = _median_time_ns(func, inputs)
            rows.append((method, n_epochs, sites.size, elapsed, value))
    write_csv(out / "bench.csv", ("method", "N", "m", "wall_time_ns", "loglik"), rows)

    manifest.stage("kernel timings")
    n_steps = int(observation_steps(settings).max())
    _, local_ns = _median_time_ns(solve_sia, cfg, n_steps)
    kernel_rows = [(_kernels.backend_name(), n_steps, local_ns)]
    foreign = _foreign_kernel_timing(cfg, n_steps, reps=3)
    if foreign is not None and foreign[0] != _kernels.backend_name():
        kernel_rows.append((foreign[0], n_steps, foreign[1]))
    else:
        manifest.note("kernel_comparison", "other backend unavailable")
    write_csv(
        out / "kernel_bench.csv",
        ("backend", "n_steps", "wall_time_ns"),
        kernel_rows,
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

EXPERIMENTS = {
    "table1": run_table1,
    "table2": run_table2,
    "table3": run_table3,
    "residuals": run_residuals,
    "variance-field": run_variance_field,
    "bench": run_bench,
}

# Mean-model choice when neither --solver nor --emulator is given.  table1
# compares both models by construction; the rest default to the solver.
_DEFAULT_MEAN_MODEL = {name: "solver" for name in EXPERIMENTS}
_DEFAULT_MEAN_MODEL["table1"] = "both"

# Experiments that compare likelihoods internally or use none ignore the
# --likelihood flag; the manifest records what actually ran.
_FIXED_LIKELIHOOD = {
    "table3": "both",
    "residuals": "none",
    "variance-field": "none",
    "bench": "all",
}


def run_experiment(
    name: str,
    cfg: GlacierConfig,
    settings: InferenceSettings,
    out_dir,
    seed: int,
    mean_model: str | None = None,
    likelihood: str | None = None,
) -> Manifest:
    """Run one named experiment, always leaving a manifest in ``out_dir``.

    ``mean_model`` is ``solver``, ``emulator`` or None for the experiment's
    default; ``likelihood`` is ``exact``, ``approx`` or None for exact.
    Failures propagate after the manifest records the failing stage.
    """
    if name not in EXPERIMENTS:
        raise ValueError(
            f"unknown experiment {name!r}; choices are {sorted(EXPERIMENTS)}"
        )
    if mean_model not in (None, "solver", "emulator", "both"):
        raise ValueError(f"unknown mean model {mean_model!r}")
    if likelihood not in (None, "exact", "approx"):
        raise ValueError(f"unknown likelihood {likelihood!r}")
    resolved_model = mean_model if mean_model is not None else _DEFAULT_MEAN_MODEL[name]
    resolved_lik = _FIXED_LIKELIHOOD.get(
        name, likelihood if likelihood is not None else "exact"
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(name, config_hash(cfg, settings), seed, resolved_model, resolved_lik)
    try:
        EXPERIMENTS[name](cfg, settings, out, seed, manifest, resolved_model, resolved_lik)
    except BaseException as exc:
        manifest.fail(exc)
        manifest.write(out / "manifest.txt")
        raise
    manifest.finish()
    manifest.write(out / "manifest.txt")
    return manifest


def write_failure_manifest(out_dir, experiment: str, seed, stage: str, exc: BaseException) -> None:
    """Record a failure that happened before an experiment could start."""
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(experiment, "unavailable", seed, "unresolved", "unresolved")
        manifest.stage(stage)
        manifest.fail(exc)
        manifest.write(out / "manifest.txt")
    except OSError:
        # The output directory is not writable; the caller already has the
        # original error to report.
        pass
