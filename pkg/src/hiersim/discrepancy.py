"""Random-walk residual operators and spatial covariances for model error.

The discrepancy between solver output and the exact solution drifts slowly,
so differencing it repeatedly shrinks it toward noise: the order-q residual
operator applies a q-th backward difference in time at every site.  Its
exact inverse simulates a random walk of the same order, which is the error
model the likelihood module builds on.

Spatial covariance comes in two flavours: a region-blocked squared
exponential kernel (independent dome, interior and margin blocks) and a
pointwise-variance field sharing one correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from hiersim.config import GlacierConfig

REGION_DOME = "dome"
REGION_INTERIOR = "interior"
REGION_MARGIN = "margin"
REGION_EXTERIOR = "exterior"

# Relative diagonal jitter that keeps assembled covariances factorable.
_JITTER = 1e-8


@dataclass(frozen=True)
class DiscrepancySeries:
    """Solver-vs-truth differences at steps 1 .. T for a set of sites."""

    values: np.ndarray
    site_indices: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DiscrepancyCov:
    """Spatial covariance of the per-step error innovations.

    ``kind`` is ``block_diagonal`` for the region-blocked kernel or
    ``gp_field`` for a variance-field product covariance; ``matrix`` is the
    dense covariance over ``site_indices``.
    """

    kind: str
    matrix: np.ndarray
    site_indices: np.ndarray


def discrepancy_series(trajectory, site_indices: np.ndarray | None = None) -> DiscrepancySeries:
    """Analytic-minus-numerical thickness at steps 1 .. T.

    Step 0 is excluded because the solver starts from the exact state, so
    the discrepancy there is identically zero.
    """
    from hiersim import sia

    cfg = trajectory.config
    if site_indices is None:
        site_indices = np.arange(cfg.n_sites, dtype=np.intp)
    site_indices = np.asarray(site_indices, dtype=np.intp)
    radii = cfg.cell_radii()[site_indices]
    values = np.empty((trajectory.n_steps, site_indices.size))
    for j in range(1, trajectory.n_steps + 1):
        exact = sia.analytic_thickness(radii, j * cfg.dt, cfg)
        values[j - 1] = exact - trajectory.fields[j, site_indices]
    return DiscrepancySeries(values=values, site_indices=site_indices, dt=cfg.dt)


def _difference_coefficients(order: int) -> np.ndarray:
    # Signed binomial row; exact integers for the small orders used here.
    return np.array([(-1) ** p * comb(order, p) for p in range(order + 1)], dtype=float)


def rw_residuals(values: np.ndarray, order: int) -> np.ndarray:
    """Order-q backward-difference residuals of a discrepancy series.

    ``values`` holds the series at steps 1 .. T (sites along the last axis).
    The first q rows use growing-order differences with the implicit zero
    state at step 0, so the output has the same shape as the input.  Rows
    with index below ``order`` are warm-up and are excluded from variance
    summaries by :func:`residual_variance`.
    """
    if order < 0:
        raise ValueError(f"difference order must be non-negative, got {order}")
    x = np.asarray(values, dtype=float)
    flat = x.ndim == 1
    if flat:
        x = x[:, None]
    n_steps = x.shape[0]
    out = np.empty_like(x)
    for j in range(1, min(order, n_steps) + 1):
        # Step j supports at most a j-th difference; the trailing term
        # would multiply the zero state at step 0 and is dropped.
        coeffs = _difference_coefficients(j)
        out[j - 1] = coeffs[:j] @ x[j - 1::-1]
    if n_steps > order:
        coeffs = _difference_coefficients(order)
        tail = sum(
            coeffs[p] * x[order - p:n_steps - p]
            for p in range(order + 1)
        )
        out[order:] = tail
    return out[:, 0] if flat else out


def simulate_rw(
    cov: np.ndarray,
    order: int,
    n_steps: int,
    rng: np.random.Generator,
    return_innovations: bool = False,
):
    """Draw a random walk of the given order started from the zero state.

    Innovations are independent draws from N(0, cov); the walk inverts
    :func:`rw_residuals`, so feeding the output back through the residual
    operator recovers the innovations to round-off.
    """
    cov = np.asarray(cov, dtype=float)
    chol = np.linalg.cholesky(cov + _JITTER * np.mean(np.diag(cov)) * np.eye(cov.shape[0]))
    innovations = rng.standard_normal((n_steps, cov.shape[0])) @ chol.T
    walk = np.empty_like(innovations)
    for j in range(1, n_steps + 1):
        eff_order = min(order, j)
        coeffs = _difference_coefficients(eff_order)
        acc = innovations[j - 1].copy()
        for p in range(1, min(eff_order, j - 1) + 1):
            acc -= coeffs[p] * walk[j - 1 - p]
        walk[j - 1] = acc
    if return_innovations:
        return walk, innovations
    return walk


def residual_variance(residuals: np.ndarray, order: int) -> np.ndarray:
    """Per-site empirical variance of residuals, warm-up rows excluded."""
    r = np.asarray(residuals, dtype=float)
    if r.shape[0] <= order:
        raise ValueError(
            f"series of length {r.shape[0]} has no rows beyond the order-{order} warm-up"
        )
    return r[order:].var(axis=0)


def classify_regions(cfg: GlacierConfig) -> np.ndarray:
    """Label every grid cell dome, interior, margin or exterior by radius.

    The dome is the inner quarter of the margin radius, the margin band
    starts at seven tenths of it, and anything beyond the margin radius is
    ice free.
    """
    radii = cfg.cell_radii()
    out = np.full(cfg.n_sites, REGION_INTERIOR, dtype=object)
    out[radii < 0.25 * cfg.margin_radius] = REGION_DOME
    out[radii >= 0.7 * cfg.margin_radius] = REGION_MARGIN
    out[radii > cfg.margin_radius] = REGION_EXTERIOR
    return out


def squared_exponential(coords: np.ndarray, lengthscale: float) -> np.ndarray:
    """Unit-variance squared-exponential correlation over site coordinates."""
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    return np.exp(-0.5 * d2 / lengthscale**2)


def build_block_sigma(
    labels: np.ndarray,
    variances: dict,
    lengthscale: float,
    coords: np.ndarray,
    site_indices: np.ndarray | None = None,
) -> DiscrepancyCov:
    """Region-blocked squared-exponential covariance.

    Sites in the same region get kernel covariance with the region's
    variance; sites in different regions are independent.  A small relative
    jitter is added to the diagonal so the matrix stays factorable.
    """
    labels = np.asarray(labels)
    n = labels.size
    if coords.shape[0] != n:
        raise ValueError(f"{n} labels but {coords.shape[0]} coordinate rows")
    missing = sorted(set(labels.tolist()) - set(variances))
    if missing:
        raise ValueError(f"no variance given for regions: {missing}")
    matrix = np.zeros((n, n))
    for region, var in variances.items():
        idx = np.flatnonzero(labels == region)
        if idx.size == 0:
            continue
        block = var * squared_exponential(coords[idx], lengthscale)
        matrix[np.ix_(idx, idx)] = block
    matrix[np.diag_indices(n)] += _JITTER * float(np.mean(np.diag(matrix)))
    if site_indices is None:
        site_indices = np.arange(n, dtype=np.intp)
    return DiscrepancyCov(kind="block_diagonal", matrix=matrix, site_indices=np.asarray(site_indices, dtype=np.intp))


def build_gp_field_sigma(
    stdevs: np.ndarray,
    correlation: np.ndarray,
    site_indices: np.ndarray | None = None,
) -> DiscrepancyCov:
    """Covariance with per-site standard deviations and a shared correlation."""
    v = np.asarray(stdevs, dtype=float)
    if np.any(v <= 0):
        raise ValueError("standard deviations must be positive")
    matrix = np.outer(v, v) * np.asarray(correlation, dtype=float)
    if site_indices is None:
        site_indices = np.arange(v.size, dtype=np.intp)
    return DiscrepancyCov(kind="gp_field", matrix=matrix, site_indices=np.asarray(site_indices, dtype=np.intp))
