"""Low-rank emulation of the thickness solver.

For each observation epoch the solver snapshots over a training set of
softness values form an (n_cells x p) matrix.  Its SVD separates spatial
modes from parameter dependence; small per-dimension regressors map softness
to the right-singular-vector entries, so evaluating a new parameter value
costs a table lookup and one small matrix product instead of a PDE
integration.

Two regressor kinds are supported.  The default random forest is fitted with
scikit-learn and then compiled into exact piecewise-constant lookup tables
(the union of the split thresholds of all trees), which makes prediction a
vectorized ``searchsorted`` with no per-call scikit-learn involvement.  The
piecewise-linear alternative interpolates the training coefficients exactly,
which is the right tool when training-point recovery matters more than
smoothing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SOFTNESS_UNIT, GlacierConfig, config_hash
from .likelihood import exact_loglik_banded, likelihood_inputs
from .sia import ObservationSet, solve_sia

__all__ = [
    "EmulatorModel",
    "train_emulator",
    "emulate",
    "emulate_sites",
    "emulated_loglik",
    "save_emulator",
    "load_emulator",
]

FORMAT_VERSION = 1

REGRESSOR_KINDS = ("forest", "interp")


@dataclass(frozen=True)
class EmulatorModel:
    """Trained emulator: per-epoch factors plus compiled coefficient tables.

    ``left`` holds the left singular vectors, shape (n_epochs, n_cells,
    n_dims); ``singulars`` the singular values, shape (n_epochs, n_dims).
    Coefficient regressors are stored as evaluation tables: for the forest
    kind ``breakpoints`` (padded with +inf) and ``table_values`` give the
    piecewise-constant prediction, for the interp kind ``table_values``
    holds the training coefficients and prediction is linear between
    training parameters.  Parameter values inside the tables are scaled by
    ``SOFTNESS_UNIT`` for conditioning.
    """

    config_id: str
    train_thetas: np.ndarray
    epochs: np.ndarray
    n_cells: int
    regressor: str
    left: np.ndarray
    singulars: np.ndarray
    breakpoints: np.ndarray
    table_values: np.ndarray

    @property
    def n_epochs(self) -> int:
        return self.epochs.size

    @property
    def n_dims(self) -> int:
        return self.singulars.shape[1]

    def epoch_row(self, epoch: int) -> int:
        rows = np.flatnonzero(self.epochs == epoch)
        if rows.size == 0:
            raise ValueError(
                f"epoch {epoch} was not trained; available epochs are "
                f"{self.epochs.tolist()}"
            )
        return int(rows[0])

    def coefficients(self, theta: float) -> np.ndarray:
        """Predicted right-singular-vector entries, shape (n_epochs, n_dims)."""
        scaled = float(theta) / SOFTNESS_UNIT
        lo = self.train_thetas.min() / SOFTNESS_UNIT
        hi = self.train_thetas.max() / SOFTNESS_UNIT
        if scaled < lo or scaled > hi:
            warnings.warn(
                f"softness {theta:.4g} lies outside the training range "
                f"[{lo * SOFTNESS_UNIT:.4g}, {hi * SOFTNESS_UNIT:.4g}]; "
                "prediction saturates at the boundary",
                RuntimeWarning,
                stacklevel=3,
            )
        if self.regressor == "forest":
            # scikit-learn casts features to float32 before comparing against
            # split thresholds; matching that cast keeps the tables exact.
            t = float(np.float32(scaled))
            idx = (t > self.breakpoints).sum(axis=2)
            return np.take_along_axis(self.table_values, idx[:, :, None], axis=2)[:, :, 0]
        x = self.train_thetas / SOFTNESS_UNIT
        i = int(np.clip(np.searchsorted(x, scaled), 1, x.size - 1))
        w = (scaled - x[i - 1]) / (x[i] - x[i - 1])
        w = float(np.clip(w, 0.0, 1.0))
        return (1.0 - w) * self.table_values[:, :, i - 1] + w * self.table_values[:, :, i]


def _elbow_rank(singulars: np.ndarray) -> int:
    """Dimension count by the largest log-drop between consecutive values."""
    floor = singulars.max() * 1e-12 + np.finfo(float).tiny
    logs = np.log(np.maximum(singulars, floor))
    drops = logs[:-1] - logs[1:]
    if drops.size == 0:
        return 1
    return int(np.argmax(drops)) + 1


def _forest_tables(x: np.ndarray, targets: np.ndarray, n_trees: int, seed: int):
    """Fit one forest per column of ``targets`` and compile it to tables.

    Returns the per-dimension breakpoint lists and the piecewise-constant
    values, exact replicas of ``forest.predict`` on every interval.
    """
    from sklearn.ensemble import RandomForestRegressor

    features = x.reshape(-1, 1)
    breakpoints = []
    values = []
    for j in range(targets.shape[1]):
        forest = RandomForestRegressor(
            n_estimators=n_trees,
            random_state=seed + j,
        )
        forest.fit(features, targets[:, j])
        splits = [
            tree.tree_.threshold[tree.tree_.feature >= 0]
            for tree in forest.estimators_
        ]
        bp = np.unique(np.concatenate(splits)) if splits else np.empty(0)
        if bp.size:
            probe = np.concatenate(
                ([bp[0] - 0.5], 0.5 * (bp[:-1] + bp[1:]), [bp[-1] + 0.5])
            )
        else:
            probe = np.array([0.0])
        values.append(forest.predict(probe.reshape(-1, 1)))
        breakpoints.append(bp)
    return breakpoints, values


def _pad_tables(breakpoints, values, n_epochs: int, n_dims: int):
    """Stack ragged per-dimension tables into padded rectangular arrays."""
    width = max(bp.size for bp in breakpoints)
    bp_out = np.full((n_epochs, n_dims, width), np.inf)
    val_out = np.zeros((n_epochs, n_dims, width + 1))
    for row, (bp, val) in enumerate(zip(breakpoints, values)):
        e, j = divmod(row, n_dims)
        bp_out[e, j, : bp.size] = bp
        val_out[e, j, : val.size] = val
        val_out[e, j, val.size :] = val[-1]
    return bp_out, val_out


def train_emulator(
    cfg: GlacierConfig,
    thetas: np.ndarray,
    epochs: np.ndarray,
    regressor: str = "forest",
    n_trees: int = 500,
    seed: int = 0,
    solver=None,
) -> EmulatorModel:
    """Run the solver over the training parameters and fit the emulator.

    ``thetas`` are softness values in SI units; ``epochs`` the solver steps
    at which snapshots are collected (one solver run per parameter covers
    all of them).  All right-singular-vector dimensions are retained while
    the training set stays small next to the output dimension; beyond a
    quarter of it an elbow rule trims the spectrum.
    """
    thetas = np.unique(np.asarray(thetas, dtype=float))
    if thetas.size < 2:
        raise ValueError(f"need at least two distinct training values, got {thetas.size}")
    if regressor not in REGRESSOR_KINDS:
        raise ValueError(f"unknown regressor {regressor!r}; options are {REGRESSOR_KINDS}")
    epochs = np.asarray(epochs, dtype=np.intp)
    if epochs.size == 0 or np.any(epochs < 1):
        raise ValueError("epochs must be positive solver steps")
    if np.any(np.diff(epochs) <= 0):
        raise ValueError("epochs must be strictly increasing")
    if solver is None:
        solver = solve_sia
    n_steps = int(epochs.max())
    p = thetas.size

    snapshots = None
    for q, theta in enumerate(thetas):
        traj = solver(cfg, n_steps, softness=theta)
        fields = traj.fields[epochs]
        if snapshots is None:
            snapshots = np.empty((epochs.size, fields.shape[1], p))
        snapshots[:, :, q] = fields

    n_cells = snapshots.shape[1]
    rank = p if p <= n_cells // 4 else None
    left_all = []
    sing_all = []
    coeff_all = []
    for e in range(epochs.size):
        u, s, vt = np.linalg.svd(snapshots[e], full_matrices=False)
        r = rank if rank is not None else _elbow_rank(s)
        left_all.append(u[:, :r])
        sing_all.append(s[:r])
        coeff_all.append(vt[:r].T)
    r = sing_all[0].size
    left = np.stack(left_all)
    singulars = np.stack(sing_all)
    coeffs = np.stack(coeff_all)

    x = thetas / SOFTNESS_UNIT
    if regressor == "forest":
        breakpoints = []
        values = []
        for e in range(epochs.size):
            bp, val = _forest_tables(x, coeffs[e], n_trees, seed + 1000 * e)
            breakpoints.extend(bp)
            values.extend(val)
        bp_arr, val_arr = _pad_tables(breakpoints, values, epochs.size, r)
    else:
        bp_arr = np.empty((epochs.size, r, 0))
        val_arr = np.swapaxes(coeffs, 1, 2).copy()

    return EmulatorModel(
        config_id=config_hash(cfg),
        train_thetas=thetas,
        epochs=epochs,
        n_cells=n_cells,
        regressor=regressor,
        left=left,
        singulars=singulars,
        breakpoints=bp_arr,
        table_values=val_arr,
    )


def emulate(model: EmulatorModel, theta: float, epoch: int) -> np.ndarray:
    """Emulated thickness field at one trained epoch, flat cell order."""
    row = model.epoch_row(epoch)
    v = model.coefficients(theta)[row]
    return model.left[row] @ (model.singulars[row] * v)


def emulate_sites(model: EmulatorModel, theta: float, site_indices: np.ndarray) -> np.ndarray:
    """Emulated thickness at a site subset for every trained epoch.

    Restricting the left factors to the observed rows keeps the hot path at
    a few thousand multiplications, which is what buys the speedup over
    running the solver.
    """
    sites = np.asarray(site_indices, dtype=np.intp)
    v = model.coefficients(theta)
    weighted = model.singulars * v
    return np.einsum("enr,er->en", model.left[:, sites, :], weighted)


def emulated_loglik(
    model: EmulatorModel,
    theta: float,
    obs: ObservationSet,
    cov,
    evaluator=exact_loglik_banded,
) -> float:
    """Exact observation log-likelihood with emulated epoch means.

    Identical to the solver-backed path except that the epoch means come
    from :func:`emulate_sites`; the observation epochs must all have been
    trained.
    """
    steps = obs.epoch_steps
    missing = np.setdiff1d(steps, model.epochs)
    if missing.size:
        raise ValueError(
            f"emulator was not trained at observation epochs {missing.tolist()}"
        )
    if steps.size == model.n_epochs and np.array_equal(steps, model.epochs):
        means = emulate_sites(model, theta, obs.site_indices)
    else:
        rows = np.searchsorted(model.epochs, steps)
        means = emulate_sites(model, theta, obs.site_indices)[rows]
    inputs = likelihood_inputs(obs, means, cov)
    return evaluator(inputs)


def save_emulator(model: EmulatorModel, path: str | Path) -> None:
    """Serialize a trained model to one .npz archive."""
    np.savez_compressed(
        path,
        format_version=np.array(FORMAT_VERSION),
        config_id=np.array(model.config_id),
        regressor=np.array(model.regressor),
        train_thetas=model.train_thetas,
        epochs=model.epochs,
        n_cells=np.array(model.n_cells),
        left=model.left,
        singulars=model.singulars,
        breakpoints=model.breakpoints,
        table_values=model.table_values,
    )


def load_emulator(path: str | Path) -> EmulatorModel:
    """Load a model written by :func:`save_emulator`."""
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(
                f"emulator file format {version} is not supported "
                f"(expected {FORMAT_VERSION})"
            )
        return EmulatorModel(
            config_id=str(archive["config_id"]),
            train_thetas=archive["train_thetas"],
            epochs=archive["epochs"].astype(np.intp),
            n_cells=int(archive["n_cells"]),
            regressor=str(archive["regressor"]),
            left=archive["left"],
            singulars=archive["singulars"],
            breakpoints=archive["breakpoints"],
            table_values=archive["table_values"],
        )
