"""Experiment configuration: physical constants, grids and the config file format.

Configuration files are plain ``key = value`` text.  Blank lines and ``#``
comments are ignored, keys mirror the field names of :class:`GlacierConfig`
and :class:`InferenceSettings`, and an empty file yields the default setup
used throughout the test system.  Parse problems are reported with the line
number so a bad file fails loudly instead of half-applying.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Mean tropical year, used to convert the ice softness from SI units
# (per second per cubic pascal) to the per-year units of the stepping loop.
SECONDS_PER_YEAR = 31_556_926.0

# Softness values in summaries and on the command line are reported as
# multiples of this unit.
SOFTNESS_UNIT = 1e-25


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or validated."""


@dataclass(frozen=True)
class GlacierConfig:
    """Physical and numerical setup of the ice sheet test system.

    Lengths are metres, times are years and the ice softness is in SI units
    (per second per cubic pascal).  The defaults reproduce the flat-bed
    oscillating dome: a 3600 m summit, a 750 km margin radius and a 200 m
    thickness oscillation with a 5000 year period, discretised on a 21 x 21
    grid with 100 km spacing and 0.1 year steps.
    """

    summit_thickness: float = 3600.0
    margin_radius: float = 750e3
    osc_amplitude: float = 200.0
    osc_period: float = 5000.0
    ice_softness: float = 31.7e-25
    nx: int = 21
    ny: int = 21
    dx: float = 100e3
    dy: float = 100e3
    dt: float = 0.1
    glen_exponent: float = 3.0
    ice_density: float = 910.0
    gravity: float = 9.81
    sliding: float = 0.0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ConfigError(f"time step must be positive, got {self.dt}")
        if self.dx <= 0 or self.dy <= 0:
            raise ConfigError(f"grid spacing must be positive, got dx={self.dx}, dy={self.dy}")
        if self.nx < 3 or self.ny < 3:
            raise ConfigError(f"grid must be at least 3 x 3, got {self.nx} x {self.ny}")
        if self.summit_thickness <= 0:
            raise ConfigError(f"summit thickness must be positive, got {self.summit_thickness}")
        if self.margin_radius <= 0:
            raise ConfigError(f"margin radius must be positive, got {self.margin_radius}")
        if self.ice_softness <= 0:
            raise ConfigError(f"ice softness must be positive, got {self.ice_softness}")
        if self.glen_exponent <= 1:
            raise ConfigError(f"flow-law exponent must exceed 1, got {self.glen_exponent}")
        if self.sliding != 0.0:
            raise ConfigError("basal sliding is not supported; sliding must be 0")

    @property
    def n_sites(self) -> int:
        """Number of grid cells, the length of a flattened thickness field."""
        return self.nx * self.ny

    def cell_coordinates(self) -> np.ndarray:
        """Return the (n_sites, 2) array of cell-centre x, y coordinates in metres.

        The dome sits at the grid centre; cells are enumerated row-major, so
        flat index ``i * nx + j`` is row i, column j.
        """
        cx = (self.nx - 1) / 2.0
        cy = (self.ny - 1) / 2.0
        jj, ii = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        x = (jj.ravel() - cx) * self.dx
        y = (ii.ravel() - cy) * self.dy
        return np.column_stack([x, y])

    def cell_radii(self) -> np.ndarray:
        """Distance of every cell centre from the dome centre, metres."""
        xy = self.cell_coordinates()
        return np.hypot(xy[:, 0], xy[:, 1])

    def diffusivity_coefficient(self, softness: float | None = None) -> float:
        """Flow-law prefactor in per-year units for a given softness.

        This is 2 * softness * (rho * g)^n / (n + 2), converted so the
        stepping loop can work in metres and years.
        """
        theta = self.ice_softness if softness is None else softness
        n = self.glen_exponent
        return 2.0 * theta * (self.ice_density * self.gravity) ** n / (n + 2.0) * SECONDS_PER_YEAR


@dataclass(frozen=True)
class InferenceSettings:
    """Observation design and inference defaults for the calibration runs.

    The softness grids are expressed in units of :data:`SOFTNESS_UNIT`;
    lengthscales are metres and `noise_sd` is metres of ice thickness.
    """

    obs_period_steps: int = 5
    n_epochs: int = 40
    noise_sd: float = 1.0
    site_offsets: tuple[int, ...] = (-5, -3, 0, 3, 5)
    grid_min: float = 10.0
    grid_max: float = 70.0
    grid_step: float = 0.5
    n_posterior_samples: int = 1_000_000
    train_min: float = 10.0
    train_max: float = 70.0
    train_step: float = 2.5
    rf_trees: int = 500
    region_lengthscale: float = 70e3
    region_variances: tuple[float, float, float] = (0.1, 0.1, 10.0)
    ess_iterations: int = 5000
    ess_burn_in: int = 1000
    ess_prior_log_mean: float = 0.0
    ess_prior_lengthscale: float = 70e3
    ess_prior_variance: float = 1.0
    residual_steps: int = 5000

    def __post_init__(self) -> None:
        if self.obs_period_steps < 1:
            raise ConfigError(f"observation period must be at least 1 step, got {self.obs_period_steps}")
        if self.n_epochs < 1:
            raise ConfigError(f"need at least one observation epoch, got {self.n_epochs}")
        if self.noise_sd <= 0:
            raise ConfigError(f"observation noise must be positive, got {self.noise_sd}")
        if not self.grid_min < self.grid_max:
            raise ConfigError(f"softness grid is empty: [{self.grid_min}, {self.grid_max}]")
        if self.grid_step <= 0 or self.train_step <= 0:
            raise ConfigError("grid steps must be positive")
        if self.ess_burn_in >= self.ess_iterations and self.ess_iterations > 0:
            raise ConfigError(
                f"burn-in ({self.ess_burn_in}) must be shorter than the chain ({self.ess_iterations})"
            )

    def softness_grid(self) -> np.ndarray:
        """Posterior support for the softness, in units of SOFTNESS_UNIT."""
        n = int(round((self.grid_max - self.grid_min) / self.grid_step)) + 1
        return self.grid_min + self.grid_step * np.arange(n)

    def training_grid(self) -> np.ndarray:
        """Emulator design points for the softness, in units of SOFTNESS_UNIT."""
        n = int(round((self.train_max - self.train_min) / self.train_step)) + 1
        return self.train_min + self.train_step * np.arange(n)


_GLACIER_FIELDS = {f.name: f for f in dataclasses.fields(GlacierConfig)}
_INFERENCE_FIELDS = {f.name: f for f in dataclasses.fields(InferenceSettings)}


def _parse_value(raw: str, target_type: type, key: str, line_no: int):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type in (tuple, tuple[int, ...], tuple[float, float, float]):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: cannot parse value {raw!r} for key {key!r}") from exc


def load_config(path: str | Path) -> tuple[GlacierConfig, InferenceSettings]:
    """Read a ``key = value`` config file into typed configuration objects.

    Unknown keys and malformed lines raise :class:`ConfigError` with the
    offending line number.  An empty file returns the package defaults.
    """
    text = Path(path).read_text()
    glacier_kwargs: dict = {}
    inference_kwargs: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line.rstrip()!r}")
        key, raw_value = (part.strip() for part in stripped.split("=", 1))
        if key in _GLACIER_FIELDS:
            spec_field = _GLACIER_FIELDS[key]
            glacier_kwargs[key] = _parse_value(raw_value, _python_type(spec_field), key, line_no)
        elif key in _INFERENCE_FIELDS:
            spec_field = _INFERENCE_FIELDS[key]
            inference_kwargs[key] = _parse_value(raw_value, _python_type(spec_field), key, line_no)
        else:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
    try:
        glacier = GlacierConfig(**glacier_kwargs)
        inference = InferenceSettings(**inference_kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    _cross_validate(glacier, inference)
    return glacier, inference


def _python_type(spec_field: dataclasses.Field) -> type:
    # Field types are stored as strings under `from __future__ import annotations`.
    name = spec_field.type if isinstance(spec_field.type, str) else spec_field.type.__name__
    if name.startswith("int"):
        return int
    if name.startswith("float"):
        return float
    if name.startswith("tuple"):
        return tuple
    return str


def _cross_validate(glacier: GlacierConfig, inference: InferenceSettings) -> None:
    half = (min(glacier.nx, glacier.ny) - 1) // 2
    for off in inference.site_offsets:
        if abs(int(off)) > half:
            raise ConfigError(
                f"site offset {off} falls outside the {glacier.nx} x {glacier.ny} grid"
            )


def config_hash(glacier: GlacierConfig, inference: InferenceSettings | None = None) -> str:
    """Stable hex digest of a configuration, recorded next to cached artifacts."""
    payload = repr(dataclasses.astuple(glacier))
    if inference is not None:
        payload += "|" + repr(dataclasses.astuple(inference))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
