"""Data-driven emulator: factorize training outputs, interpolate coefficients.

Training extracts a time-varying basis from the training output matrix
(SVD or NMF) and conditions one GP per coefficient row on the simulator
parameters.  Prediction evaluates the coefficient GPs at the query
parameters and recombines them with the basis, which is linearly
interpolated in time for off-grid queries.  Extrapolation beyond the
training time grid is rejected: the basis is undefined there.
"""

import hashlib
import json
import os
import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import atomic_write
from .exceptions import ConfigError, TimeExtrapolationError
from .factorization import (
    NmfFactorizer,
    SvdFactorizer,
    load_factor_model,
    save_factor_model,
)
from .gp import GaussianProcess, load_gp, save_gp
from .validation import as_2d_params, as_float_array, check_strictly_increasing


def _grid_hash(times):
    return hashlib.sha256(np.ascontiguousarray(times).tobytes()).hexdigest()[:16]


class DataDrivenEmulator(BaseEstimator, RegressorMixin):
    """Factorization + GP-coefficient emulator.

    Parameters
    ----------
    method : {"svd", "nmf"}
    n_components : int
        Truncation rank of the basis.
    penalty_basis, penalty_coeffs, nmf_max_iter, nmf_tol : NMF options.
    gp_optimize, gp_restarts, nugget, seed : coefficient-GP options.
    clip_negative : bool
        Clip GP-predicted coefficients at zero before recombination
        (off by default; the GPs are unconstrained, so NMF coefficients
        can go negative and this is reported instead of hidden).
    """

    def __init__(
        self,
        method="svd",
        n_components=6,
        penalty_basis=0.0,
        penalty_coeffs=0.0,
        nmf_max_iter=200,
        nmf_tol=1e-9,
        gp_optimize=True,
        gp_restarts=8,
        nugget=None,
        clip_negative=False,
        seed=0,
    ):
        self.method = method
        self.n_components = n_components
        self.penalty_basis = penalty_basis
        self.penalty_coeffs = penalty_coeffs
        self.nmf_max_iter = nmf_max_iter
        self.nmf_tol = nmf_tol
        self.gp_optimize = gp_optimize
        self.gp_restarts = gp_restarts
        self.nugget = nugget
        self.clip_negative = clip_negative
        self.seed = seed

    def _make_factorizer(self):
        if self.method == "svd":
            return SvdFactorizer(n_components=self.n_components)
        if self.method == "nmf":
            return NmfFactorizer(
                n_components=self.n_components,
                penalty_basis=self.penalty_basis,
                penalty_coeffs=self.penalty_coeffs,
                max_iter=self.nmf_max_iter,
                tol=self.nmf_tol,
                seed=self.seed,
            )
        raise ConfigError(f"method must be 'svd' or 'nmf', got {self.method!r}")

    def fit(self, X, Y, times=None):
        """Factorize training outputs and condition the coefficient GPs.

        X : (n_runs, n_params) simulator parameters.
        Y : (n_runs, n_times) outputs, one row per run.
        times : (n_times,) training time grid.
        """
        theta = as_2d_params(X, name="X")
        Y = as_float_array(np.atleast_2d(Y), name="Y", ndim=2)
        if times is None:
            raise ConfigError("the training time grid is required")
        times = check_strictly_increasing(np.asarray(times, dtype=float))
        if Y.shape != (theta.shape[0], times.shape[0]):
            raise ConfigError(
                f"Y must be (n_runs, n_times) = ({theta.shape[0]}, {times.shape[0]}), "
                f"got {Y.shape}"
            )
        if self.n_components > theta.shape[0]:
            raise ConfigError(
                f"n_components={self.n_components} exceeds the number of "
                f"training runs ({theta.shape[0]})"
            )
        self.times_ = times
        self.theta_train_ = theta
        self.factor_ = self._make_factorizer().fit(Y)
        self.coeff_gps_ = []
        for i in range(self.factor_.coeffs_.shape[0]):
            gp = GaussianProcess(
                mean="constant",
                nugget=self.nugget,
                optimize=self.gp_optimize,
                n_restarts=self.gp_restarts,
                seed=self.seed + i,
            )
            gp.fit(theta, self.factor_.coeffs_[i, :])
            self.coeff_gps_.append(gp)
        self.training_error_ = self.factor_.training_error_
        return self

    def _interpolated_basis(self, times):
        """Basis rows linearly interpolated to the query times."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        grid = self.times_
        if np.any(times < grid[0]) or np.any(times > grid[-1]):
            raise TimeExtrapolationError(
                f"query times must lie within the training grid "
                f"[{grid[0]}, {grid[-1]}]; the basis is undefined outside it"
            )
        basis = self.factor_.basis_
        return np.column_stack(
            [np.interp(times, grid, basis[:, i]) for i in range(basis.shape[1])]
        )

    def predict_coefficients(self, X, return_var=False):
        """Coefficient means (and variances) at query parameters."""
        check_is_fitted(self, "coeff_gps_")
        theta = as_2d_params(X, name="X")
        means = np.column_stack([gp.predict(theta) for gp in self.coeff_gps_])
        if not return_var:
            return means
        variances = np.column_stack(
            [gp.predict(theta, return_var=True)[1] for gp in self.coeff_gps_]
        )
        return means, variances

    def predict(self, X, times=None, return_info=False):
        """Emulated output series at query parameters.

        ``times`` defaults to the training grid; off-grid times use linear
        interpolation of the basis and must stay inside the grid range.
        With ``return_info=True`` also returns flags for out-of-hull
        parameter queries and negative predicted coefficients.
        """
        check_is_fitted(self, "coeff_gps_")
        theta = as_2d_params(X, name="X")
        times = self.times_ if times is None else times
        basis = self._interpolated_basis(times)
        coefficients = self.predict_coefficients(theta)
        info = {
            "extrapolated_parameters": (
                np.any(theta < self.theta_train_.min(axis=0), axis=1)
                | np.any(theta > self.theta_train_.max(axis=0), axis=1)
            ),
            "negative_coefficients": np.any(coefficients < 0, axis=1),
        }
        if np.any(info["extrapolated_parameters"]):
            warnings.warn(
                "query parameters outside the training hull; the GP extrapolates",
                stacklevel=2,
            )
        if self.clip_negative:
            coefficients = np.maximum(coefficients, 0.0)
        outputs = coefficients @ basis.T
        if return_info:
            return outputs, info
        return outputs

    def predict_with_uncertainty(self, X, times=None):
        """Mean and variance series, propagating independent coefficient GPs.

        Var[y(t)] = sum_i basis_i(t)^2 Var[coefficient_i]; coefficient
        cross-covariances are not modeled.
        """
        check_is_fitted(self, "coeff_gps_")
        theta = as_2d_params(X, name="X")
        times = self.times_ if times is None else times
        basis = self._interpolated_basis(times)
        means, variances = self.predict_coefficients(theta, return_var=True)
        if self.clip_negative:
            means = np.maximum(means, 0.0)
        return means @ basis.T, variances @ (basis.T**2)


def save_data_driven(emulator, directory):
    check_is_fitted(emulator, "coeff_gps_")
    os.makedirs(directory, exist_ok=True)
    save_factor_model(emulator.factor_, directory)
    for i, gp in enumerate(emulator.coeff_gps_):
        save_gp(gp, directory, prefix=f"gp_{i}")
    from .dataset import write_csv_matrix

    write_csv_matrix(
        os.path.join(directory, "train_times.csv"), emulator.times_.reshape(-1, 1), ["t"]
    )
    meta = {
        "method": emulator.method,
        "n_components": int(emulator.factor_.coeffs_.shape[0]),
        "clip_negative": emulator.clip_negative,
        "grid_hash": _grid_hash(emulator.times_),
        "seed": emulator.seed,
        "training_error": emulator.training_error_,
    }
    atomic_write(
        os.path.join(directory, "emulator_meta.json"),
        lambda fh: json.dump(meta, fh, indent=1),
    )


def load_data_driven(directory):
    with open(os.path.join(directory, "emulator_meta.json")) as fh:
        meta = json.load(fh)
    from .dataset import read_csv_matrix

    _, times = read_csv_matrix(os.path.join(directory, "train_times.csv"), "train_times.csv")
    emulator = DataDrivenEmulator(
        method=meta["method"],
        n_components=meta["n_components"],
        clip_negative=meta["clip_negative"],
        seed=meta["seed"],
    )
    emulator.times_ = times[:, 0]
    if _grid_hash(emulator.times_) != meta["grid_hash"]:
        raise ConfigError("stored time grid does not match its recorded hash")
    emulator.factor_ = load_factor_model(directory)
    emulator.coeff_gps_ = []
    i = 0
    while os.path.exists(os.path.join(directory, f"gp_{i}_meta.json")):
        emulator.coeff_gps_.append(load_gp(directory, prefix=f"gp_{i}"))
        i += 1
    if len(emulator.coeff_gps_) != meta["n_components"]:
        raise ConfigError(
            f"expected {meta['n_components']} coefficient GPs, found {len(emulator.coeff_gps_)}"
        )
    emulator.theta_train_ = emulator.coeff_gps_[0].X_train_
    emulator.training_error_ = meta["training_error"]
    return emulator
