"""Low-level numerical kernels with JIT and pure-numpy backends.

The two hot loops of the package live here: the explicit thickness-evolution
step of the ice sheet solver and the banded Cholesky factorisation behind
the exact log-likelihood.  Each kernel has a numba implementation and a
vectorised numpy twin with identical semantics; setting the environment
variable ``HIERSIM_NO_NUMBA`` to a truthy value selects the numpy path,
as does running on an interpreter without numba installed.

Band storage follows the lower-diagonal-ordered convention: for a symmetric
matrix A with bandwidth ``bw``, ``band[d, j] = A[j + d, j]`` for
``0 <= d <= bw``.  The factorisation overwrites the band with the Cholesky
factor L in the same layout.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_disabled() -> bool:
    flag = os.environ.get("HIERSIM_NO_NUMBA", "")
    return flag.strip().lower() in {"1", "true", "yes", "on"}


try:
    if _numba_disabled():
        raise ImportError("numba disabled by HIERSIM_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        # No-op decorator so the module works without a JIT compiler.
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


def backend_name() -> str:
    """Human-readable name of the active kernel backend."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# Ice sheet stepping loop
# ---------------------------------------------------------------------------

def _step_thickness_loops(h, mass_balance, coef, flow_power, dx, dy, dt, h_out):
    """One explicit step of the nonlinear diffusion update, scalar loops.

    Face diffusivities use averaged thickness and a centred surface slope;
    the cross-slope at an x-face averages the four neighbouring y-gradients
    and vice versa.  Boundary cells are held fixed and thickness is clamped
    at zero: the ice-free exterior must stay ice free.
    """
    ny, nx = h.shape
    inv_dx = 1.0 / dx
    inv_dy = 1.0 / dy
    for i in range(ny):
        h_out[i, 0] = h[i, 0]
        h_out[i, nx - 1] = h[i, nx - 1]
    for j in range(nx):
        h_out[0, j] = h[0, j]
        h_out[ny - 1, j] = h[ny - 1, j]
    for i in range(1, ny - 1):
        for j in range(1, nx - 1):
            # East and west faces.
            flux = 0.0
            for sj in (1, -1):
                jn = j + sj
                hf = 0.5 * (h[i, j] + h[i, jn])
                gx = (h[i, jn] - h[i, j]) * sj * inv_dx
                gy = 0.25 * (h[i + 1, j] + h[i + 1, jn] - h[i - 1, j] - h[i - 1, jn]) * inv_dy
                slope2 = gx * gx + gy * gy
                dcoef = coef * hf ** flow_power * slope2
                flux += dcoef * (h[i, jn] - h[i, j]) * inv_dx * inv_dx
            # North and south faces.
            for si in (1, -1):
                im = i + si
                hf = 0.5 * (h[i, j] + h[im, j])
                gy = (h[im, j] - h[i, j]) * si * inv_dy
                gx = 0.25 * (h[i, j + 1] + h[im, j + 1] - h[i, j - 1] - h[im, j - 1]) * inv_dx
                slope2 = gx * gx + gy * gy
                dcoef = coef * hf ** flow_power * slope2
                flux += dcoef * (h[im, j] - h[i, j]) * inv_dy * inv_dy
            new_val = h[i, j] + dt * (flux + mass_balance[i, j])
            h_out[i, j] = new_val if new_val > 0.0 else 0.0


_step_thickness_jit = njit(cache=True)(_step_thickness_loops)


@njit(cache=True)
def _run_sia_jit(h_init, mass_balance, coef, flow_power, dx, dy, dt, h_cap, out):
    """Run the stepping loop, writing every intermediate field into ``out``.

    Returns -1 on success or the 1-based index of the first unstable step,
    where unstable means a non-finite value or thickness above ``h_cap``.
    """
    n_steps = mass_balance.shape[0]
    ny, nx = h_init.shape
    out[0] = h_init
    for t in range(n_steps):
        _step_thickness_jit(out[t], mass_balance[t], coef, flow_power, dx, dy, dt, out[t + 1])
        for i in range(ny):
            for j in range(nx):
                v = out[t + 1, i, j]
                if not np.isfinite(v) or v > h_cap:
                    return t + 1
    return -1


def _step_thickness_numpy(h, mass_balance, coef, flow_power, dx, dy, dt, h_out):
    """Vectorised twin of :func:`_step_thickness_loops`."""
    hf_x = 0.5 * (h[:, 1:] + h[:, :-1])
    gx_x = (h[:, 1:] - h[:, :-1]) / dx
    gy_x = np.zeros_like(hf_x)
    gy_x[1:-1, :] = (h[2:, 1:] + h[2:, :-1] - h[:-2, 1:] - h[:-2, :-1]) / (4.0 * dy)
    d_x = coef * hf_x ** flow_power * (gx_x ** 2 + gy_x ** 2)

    hf_y = 0.5 * (h[1:, :] + h[:-1, :])
    gy_y = (h[1:, :] - h[:-1, :]) / dy
    gx_y = np.zeros_like(hf_y)
    gx_y[:, 1:-1] = (h[1:, 2:] + h[:-1, 2:] - h[1:, :-2] - h[:-1, :-2]) / (4.0 * dx)
    d_y = coef * hf_y ** flow_power * (gx_y ** 2 + gy_y ** 2)

    flux = np.zeros_like(h)
    flux[1:-1, 1:-1] = (
        (d_x[1:-1, 1:] * (h[1:-1, 2:] - h[1:-1, 1:-1])
         - d_x[1:-1, :-1] * (h[1:-1, 1:-1] - h[1:-1, :-2])) / dx ** 2
        + (d_y[1:, 1:-1] * (h[2:, 1:-1] - h[1:-1, 1:-1])
           - d_y[:-1, 1:-1] * (h[1:-1, 1:-1] - h[:-2, 1:-1])) / dy ** 2
    )
    h_out[:] = h
    interior = h[1:-1, 1:-1] + dt * (flux[1:-1, 1:-1] + mass_balance[1:-1, 1:-1])
    h_out[1:-1, 1:-1] = np.maximum(interior, 0.0)


def _run_sia_numpy(h_init, mass_balance, coef, flow_power, dx, dy, dt, h_cap, out):
    n_steps = mass_balance.shape[0]
    out[0] = h_init
    for t in range(n_steps):
        _step_thickness_numpy(out[t], mass_balance[t], coef, flow_power, dx, dy, dt, out[t + 1])
        block = out[t + 1]
        if not np.all(np.isfinite(block)) or np.max(block) > h_cap:
            return t + 1
    return -1


def run_sia(h_init, mass_balance, coef, flow_power, dx, dy, dt, h_cap, out):
    """Advance the thickness field ``mass_balance.shape[0]`` explicit steps.

    ``out`` must have shape ``(n_steps + 1, ny, nx)``; slot 0 receives the
    initial field unchanged.  Returns -1 on success, or the index of the
    first unstable step.
    """
    if NUMBA_ENABLED:
        return _run_sia_jit(h_init, mass_balance, coef, flow_power, dx, dy, dt, h_cap, out)
    return _run_sia_numpy(h_init, mass_balance, coef, flow_power, dx, dy, dt, h_cap, out)


# ---------------------------------------------------------------------------
# Banded Cholesky
# ---------------------------------------------------------------------------

def _band_cholesky_loops(band):
    """In-place lower-band Cholesky; returns the failing column or -1.

    Cost is order n * bw^2, which for the block-tridiagonal likelihood
    precision (bandwidth 2m - 1, size N m) is the order N m^3 the banded
    route is chosen for.
    """
    bw = band.shape[0] - 1
    n = band.shape[1]
    for j in range(n):
        lo = j - bw if j - bw > 0 else 0
        for k in range(lo, j):
            off = j - k
            ljk = band[off, k]
            if ljk != 0.0:
                for d in range(0, bw - off + 1):
                    band[d, j] -= band[d + off, k] * ljk
        pivot = band[0, j]
        if not np.isfinite(pivot) or pivot <= 0.0:
            return j
        pivot = np.sqrt(pivot)
        band[0, j] = pivot
        top = bw if bw < n - 1 - j else n - 1 - j
        for d in range(1, top + 1):
            band[d, j] /= pivot
        for d in range(top + 1, bw + 1):
            band[d, j] = 0.0
    return -1


def _band_solve_loops(band, rhs):
    """Solve L L^T x = rhs in place given the factored band."""
    bw = band.shape[0] - 1
    n = band.shape[1]
    for j in range(n):
        rhs[j] /= band[0, j]
        top = bw if bw < n - 1 - j else n - 1 - j
        for d in range(1, top + 1):
            rhs[j + d] -= band[d, j] * rhs[j]
    for j in range(n - 1, -1, -1):
        top = bw if bw < n - 1 - j else n - 1 - j
        acc = rhs[j]
        for d in range(1, top + 1):
            acc -= band[d, j] * rhs[j + d]
        rhs[j] = acc / band[0, j]


_band_cholesky_jit = njit(cache=True)(_band_cholesky_loops)
_band_solve_jit = njit(cache=True)(_band_solve_loops)


def _band_cholesky_numpy(band):
    bw = band.shape[0] - 1
    n = band.shape[1]
    for j in range(n):
        lo = max(0, j - bw)
        for k in range(lo, j):
            off = j - k
            ljk = band[off, k]
            if ljk != 0.0:
                width = bw - off + 1
                band[:width, j] -= band[off:off + width, k] * ljk
        pivot = band[0, j]
        if not np.isfinite(pivot) or pivot <= 0.0:
            return j
        pivot = np.sqrt(pivot)
        band[0, j] = pivot
        top = min(bw, n - 1 - j)
        if top >= 1:
            band[1:top + 1, j] /= pivot
        band[top + 1:, j] = 0.0
    return -1


def _band_solve_numpy(band, rhs):
    bw = band.shape[0] - 1
    n = band.shape[1]
    for j in range(n):
        rhs[j] /= band[0, j]
        top = min(bw, n - 1 - j)
        if top >= 1:
            rhs[j + 1:j + top + 1] -= band[1:top + 1, j] * rhs[j]
    for j in range(n - 1, -1, -1):
        top = min(bw, n - 1 - j)
        if top >= 1:
            rhs[j] -= band[1:top + 1, j] @ rhs[j + 1:j + top + 1]
        rhs[j] /= band[0, j]


def band_cholesky(band):
    """Factor a symmetric positive definite band matrix in place.

    ``band`` holds the lower diagonals, ``band[d, j] = A[j + d, j]``, and is
    overwritten with L in the same layout.  Returns -1 on success or the
    index of the first non-positive pivot so callers can fail over.
    """
    if NUMBA_ENABLED:
        return _band_cholesky_jit(band)
    return _band_cholesky_numpy(band)


def band_solve(band, rhs):
    """Solve A x = rhs in place using a factor produced by :func:`band_cholesky`."""
    if NUMBA_ENABLED:
        _band_solve_jit(band, rhs)
    else:
        _band_solve_numpy(band, rhs)


def band_logdet(band) -> float:
    """Log-determinant of A from its band factor: twice the sum of log pivots."""
    return 2.0 * float(np.sum(np.log(band[0, :])))


def warm_up() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    h = np.zeros((3, 3))
    mb = np.zeros((1, 3, 3))
    out = np.zeros((2, 3, 3))
    run_sia(h, mb, 1.0, 5.0, 1.0, 1.0, 0.1, 1e9, out)
    band = np.array([[2.0, 2.0, 2.0], [0.5, 0.5, 0.0]])
    band_cholesky(band)
    band_solve(band, np.ones(3))
