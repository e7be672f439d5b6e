"""Shallow-ice test system: analytic solution, forcing and numerical solver.

The reference setup is a radially symmetric dome on a flat bed whose
thickness oscillates inside an annulus.  Because the analytic thickness is
prescribed, the mass balance that makes it an exact solution of the
thickness evolution equation can be computed and fed to the solver, so
solver output can be compared against a known truth at every grid cell and
time step.

Radial profiles are evaluated on a fine one-dimensional grid and the flux
divergence is formed there with centred differences; the two-dimensional
solver never sees the radial structure and works on the full grid with a
staggered-face diffusivity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hiersim import _kernels
from hiersim.config import GlacierConfig, InferenceSettings, config_hash

# Instability guard: a stable run of the oscillating dome never exceeds the
# summit thickness by more than the oscillation amplitude, so ten times the
# summit is far outside physical range.
INSTABILITY_FACTOR = 10.0

# Resolution of the auxiliary radial grid used for the compensatory forcing.
_N_FINE = 16001

TRAJECTORY_FORMAT_VERSION = 1


class SolverInstabilityError(RuntimeError):
    """Raised when the explicit stepping loop produces non-physical thickness."""

    def __init__(self, step: int, dt: float):
        self.step = step
        super().__init__(
            f"thickness became non-finite or exceeded {INSTABILITY_FACTOR:g}x the summit "
            f"thickness at step {step} (t = {step * dt:g} years); reduce the time step"
        )


def static_profile(r, cfg: GlacierConfig):
    """Steady dome thickness at radius ``r`` metres.

    The profile has the summit value at the centre, falls to zero at the
    margin radius like the square root of the remaining distance, and is
    identically zero beyond it.
    """
    n = cfg.glen_exponent
    s = np.asarray(r, dtype=float) / cfg.margin_radius
    expo = n / (2.0 * n + 2.0)
    scale = cfg.summit_thickness / (1.0 - 1.0 / n) ** expo
    inside = s < 1.0
    s_in = np.where(inside, s, 0.0)
    bracket = (
        (1.0 + 1.0 / n) * s_in
        - 1.0 / n
        + (1.0 - s_in) ** (1.0 + 1.0 / n)
        - s_in ** (1.0 + 1.0 / n)
    )
    profile = scale * np.maximum(bracket, 0.0) ** expo
    return np.where(inside, profile, 0.0)


def oscillation_window(r, cfg: GlacierConfig):
    """Squared-cosine bump supported on the annulus between 0.3 and 0.9 margin radii."""
    r = np.asarray(r, dtype=float)
    centre = 0.6 * cfg.margin_radius
    width = 0.6 * cfg.margin_radius
    inside = (r > 0.3 * cfg.margin_radius) & (r < 0.9 * cfg.margin_radius)
    phase = np.pi * (r - centre) / width
    return np.where(inside, np.cos(phase) ** 2, 0.0)


def analytic_thickness(r, t: float, cfg: GlacierConfig):
    """Exact thickness at radius ``r`` metres and time ``t`` years."""
    wobble = cfg.osc_amplitude * np.sin(2.0 * np.pi * t / cfg.osc_period)
    return static_profile(r, cfg) + wobble * oscillation_window(r, cfg)


def thickness_rate(r, t: float, cfg: GlacierConfig):
    """Time derivative of the exact thickness, metres per year."""
    rate = cfg.osc_amplitude * (2.0 * np.pi / cfg.osc_period) * np.cos(2.0 * np.pi * t / cfg.osc_period)
    return rate * oscillation_window(r, cfg)


def _fine_radii(cfg: GlacierConfig) -> np.ndarray:
    # Extend slightly past the margin so interpolation decays to zero there.
    return np.linspace(0.0, 1.02 * cfg.margin_radius, _N_FINE)


def _flux_divergence_fine(r_fine: np.ndarray, h_fine: np.ndarray, cfg: GlacierConfig) -> np.ndarray:
    """Divergence of the radial thickness flux, computed with centred differences.

    Works on the one-dimensional profile: the transport term is
    coef * H^(n+2) * (dH/dr)^n and the divergence in polar coordinates is
    (1/r) d(r q)/dr, with the r = 0 limit handled by symmetry.
    """
    n = cfg.glen_exponent
    coef = cfg.diffusivity_coefficient()
    dr = r_fine[1] - r_fine[0]
    grad = np.gradient(h_fine, dr)
    transport = coef * h_fine ** (n + 2.0) * np.abs(grad) ** (n - 1.0) * grad
    div = np.empty_like(h_fine)
    rq = r_fine * transport
    div[1:] = np.gradient(rq, dr)[1:] / r_fine[1:]
    div[0] = 2.0 * (transport[1] - transport[0]) / dr
    return div


def compensatory_mass_balance(r, t: float, cfg: GlacierConfig):
    """Mass balance that makes the analytic thickness satisfy the evolution equation.

    Defined as the thickness rate minus the diffusive term of the equation,
    evaluated from the exact profile at time ``t`` and interpolated to the
    requested radii.  It is zero beyond the margin.
    """
    r_fine = _fine_radii(cfg)
    h_fine = analytic_thickness(r_fine, t, cfg)
    forcing = thickness_rate(r_fine, t, cfg) - _flux_divergence_fine(r_fine, h_fine, cfg)
    return np.interp(np.asarray(r, dtype=float), r_fine, forcing, right=0.0)


_mass_balance_cache: dict[tuple, np.ndarray] = {}


def mass_balance_series(cfg: GlacierConfig, n_steps: int) -> np.ndarray:
    """Compensatory forcing on the model grid for steps 0 .. n_steps - 1.

    Returns an (n_steps, ny, nx) array with the forcing evaluated at the
    start of each step.  Results are cached per configuration because the
    series is reused across every run that varies only the softness.
    """
    key = (config_hash(cfg), n_steps)
    cached = _mass_balance_cache.get(key)
    if cached is not None:
        return cached
    radii = cfg.cell_radii()
    r_fine = _fine_radii(cfg)
    static_fine = static_profile(r_fine, cfg)
    window_fine = oscillation_window(r_fine, cfg)
    window_sites = oscillation_window(radii, cfg)
    out = np.empty((n_steps, cfg.ny, cfg.nx))
    omega = 2.0 * np.pi / cfg.osc_period
    for step in range(n_steps):
        t = step * cfg.dt
        h_fine = static_fine + cfg.osc_amplitude * np.sin(omega * t) * window_fine
        div = _flux_divergence_fine(r_fine, h_fine, cfg)
        rate_sites = cfg.osc_amplitude * omega * np.cos(omega * t) * window_sites
        forcing = rate_sites - np.interp(radii, r_fine, div, right=0.0)
        out[step] = forcing.reshape(cfg.ny, cfg.nx)
    while len(_mass_balance_cache) >= 4:
        _mass_balance_cache.pop(next(iter(_mass_balance_cache)))
    _mass_balance_cache[key] = out
    return out


@dataclass(frozen=True)
class Trajectory:
    """Solver output: thickness fields for steps 0 .. n_steps.

    ``fields`` has shape (n_steps + 1, n_cells) with row j the flattened
    thickness after j steps; row 0 is the initial condition unchanged.
    """

    config: GlacierConfig
    softness: float
    fields: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.fields.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        """Model time of each stored field, years."""
        return np.arange(self.fields.shape[0]) * self.config.dt

    def field(self, step: int) -> np.ndarray:
        """Thickness after ``step`` steps as an (ny, nx) grid."""
        return self.fields[step].reshape(self.config.ny, self.config.nx)


def solve_sia(
    cfg: GlacierConfig,
    n_steps: int,
    softness: float | None = None,
    mass_balance: np.ndarray | None = None,
) -> Trajectory:
    """Integrate the thickness equation ``n_steps`` explicit steps from the exact state.

    The forcing is always the compensatory mass balance of the reference
    configuration; ``softness`` only changes the flow-law prefactor of the
    simulated ice, which is how candidate parameter values are scored
    against observations generated at the true value.
    """
    theta = cfg.ice_softness if softness is None else float(softness)
    if mass_balance is None:
        mass_balance = mass_balance_series(cfg, n_steps)
    if mass_balance.shape != (n_steps, cfg.ny, cfg.nx):
        raise ValueError(
            f"mass balance shape {mass_balance.shape} does not match "
            f"({n_steps}, {cfg.ny}, {cfg.nx})"
        )
    h0 = analytic_thickness(cfg.cell_radii(), 0.0, cfg).reshape(cfg.ny, cfg.nx)
    out = np.empty((n_steps + 1, cfg.ny, cfg.nx))
    coef = cfg.diffusivity_coefficient(theta)
    bad_step = _kernels.run_sia(
        h0,
        mass_balance,
        coef,
        cfg.glen_exponent + 2.0,
        cfg.dx,
        cfg.dy,
        cfg.dt,
        INSTABILITY_FACTOR * cfg.summit_thickness,
        out,
    )
    if bad_step >= 0:
        raise SolverInstabilityError(int(bad_step), cfg.dt)
    return Trajectory(config=cfg, softness=theta, fields=out.reshape(n_steps + 1, cfg.n_sites))


@dataclass(frozen=True)
class ObservationSet:
    """Noisy thickness observations at a site subset and regular epochs.

    Epoch c (1-based) is solver step ``c * period_steps``; ``values`` has
    shape (n_epochs, n_obs_sites) in site-index order.
    """

    site_indices: np.ndarray
    period_steps: int
    noise_sd: float
    values: np.ndarray

    @property
    def n_epochs(self) -> int:
        return self.values.shape[0]

    @property
    def n_obs_sites(self) -> int:
        return self.values.shape[1]

    @property
    def epoch_steps(self) -> np.ndarray:
        return self.period_steps * np.arange(1, self.n_epochs + 1)

    def incidence(self, n_cells: int) -> np.ndarray:
        """Observation operator as a dense 0/1 matrix with unit-vector rows."""
        a = np.zeros((self.n_obs_sites, n_cells))
        a[np.arange(self.n_obs_sites), self.site_indices] = 1.0
        return a


def default_site_indices(cfg: GlacierConfig, offsets=(-5, -3, 0, 3, 5)) -> np.ndarray:
    """Flat indices of the default observation sites.

    Sites form the Cartesian product of the given row and column offsets
    around the grid centre; the defaults give 25 on-ice sites spanning the
    dome, the interior and the margin zone.
    """
    ci = (cfg.ny - 1) // 2
    cj = (cfg.nx - 1) // 2
    indices = []
    for oi in offsets:
        for oj in offsets:
            i, j = ci + int(oi), cj + int(oj)
            if not (0 <= i < cfg.ny and 0 <= j < cfg.nx):
                raise ValueError(f"site offset ({oi}, {oj}) is outside the grid")
            indices.append(i * cfg.nx + j)
    return np.array(sorted(indices), dtype=np.intp)


def generate_observations(
    cfg: GlacierConfig,
    settings: InferenceSettings,
    rng: np.random.Generator,
    site_indices: np.ndarray | None = None,
) -> ObservationSet:
    """Sample observations of the exact thickness with additive Gaussian noise."""
    if site_indices is None:
        site_indices = default_site_indices(cfg, settings.site_offsets)
    site_indices = np.asarray(site_indices, dtype=np.intp)
    if site_indices.size and (site_indices.min() < 0 or site_indices.max() >= cfg.n_sites):
        raise ValueError(
            f"site indices must lie in [0, {cfg.n_sites}), got range "
            f"[{site_indices.min()}, {site_indices.max()}]"
        )
    radii = cfg.cell_radii()[site_indices]
    values = np.empty((settings.n_epochs, site_indices.size))
    for c in range(1, settings.n_epochs + 1):
        t = c * settings.obs_period_steps * cfg.dt
        values[c - 1] = analytic_thickness(radii, t, cfg)
    values += settings.noise_sd * rng.standard_normal(values.shape)
    return ObservationSet(
        site_indices=site_indices,
        period_steps=settings.obs_period_steps,
        noise_sd=settings.noise_sd,
        values=values,
    )


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    """Write a trajectory as flat little-endian binary plus a JSON sidecar header."""
    path = Path(path)
    data = np.ascontiguousarray(traj.fields, dtype="<f8")
    path.write_bytes(data.tobytes())
    header = {
        "format_version": TRAJECTORY_FORMAT_VERSION,
        "dtype": "<f8",
        "shape": list(data.shape),
        "nx": traj.config.nx,
        "ny": traj.config.ny,
        "dt": traj.config.dt,
        "softness": traj.softness,
        "config_hash": config_hash(traj.config),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2) + "\n")


def load_trajectory(path: str | Path, cfg: GlacierConfig) -> Trajectory:
    """Read a trajectory written by :func:`save_trajectory`, checking the config hash."""
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if header["format_version"] != TRAJECTORY_FORMAT_VERSION:
        raise ValueError(f"unsupported trajectory format version {header['format_version']}")
    if header["config_hash"] != config_hash(cfg):
        raise ValueError("trajectory cache was produced by a different configuration")
    shape = tuple(header["shape"])
    fields = np.frombuffer(path.read_bytes(), dtype=header["dtype"]).reshape(shape).copy()
    return Trajectory(config=cfg, softness=float(header["softness"]), fields=fields)
