"""Time-varying basis extraction from training output matrices.

Both factorizers follow the scikit-learn transformer protocol with runs as
samples: ``fit`` consumes an (n_runs, n_times) matrix and exposes the
time-major basis as ``basis_`` (n_times, n_components) together with the
per-run coefficients ``coeffs_`` (n_components, n_runs), so that
``outputs ~= basis_ @ coeffs_`` column-per-run.  ``transform`` projects new
series onto the frozen basis.
"""

import json
import os

import numpy as np
from scipy.optimize import nnls
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import atomic_write, read_csv_matrix, write_csv_matrix
from .exceptions import ConfigError
from .validation import as_float_array


def _deterministic_signs(basis, coeffs):
    # Largest-magnitude entry of each basis column made positive; keeps
    # outputs identical across LAPACK implementations.
    for i in range(basis.shape[1]):
        pivot = np.argmax(np.abs(basis[:, i]))
        if basis[pivot, i] < 0:
            basis[:, i] *= -1.0
            coeffs[i, :] *= -1.0
    return basis, coeffs


class SvdFactorizer(BaseEstimator, TransformerMixin):
    """Truncated singular value decomposition of the output matrix.

    The retained basis columns are the leading left singular vectors, the
    optimal rank-``n_components`` approximation in the Frobenius norm; the
    reconstruction error equals the norm of the discarded spectrum.
    """

    method = "svd"

    def __init__(self, n_components):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = as_float_array(X, name="training outputs", ndim=2)
        n_runs, n_times = X.shape
        q = int(self.n_components)
        if not 1 <= q <= min(n_runs, n_times):
            raise ConfigError(
                f"n_components must be in [1, {min(n_runs, n_times)}], got {q}"
            )
        Y = X.T  # time-major, one column per run
        U, s, Vt = np.linalg.svd(Y, full_matrices=False)
        basis = U[:, :q].copy()
        coeffs = s[:q, None] * Vt[:q, :]
        self.basis_, self.coeffs_ = _deterministic_signs(basis, coeffs)
        self.singular_values_ = s
        self.training_error_ = float(np.sqrt(np.sum(s[q:] ** 2)))
        return self

    def transform(self, X):
        """Coefficients of new series (rows) in the fitted basis."""
        check_is_fitted(self, "basis_")
        X = as_float_array(np.atleast_2d(X), name="series", ndim=2)
        if X.shape[1] != self.basis_.shape[0]:
            raise ConfigError(
                f"series have {X.shape[1]} time points, basis has {self.basis_.shape[0]}"
            )
        return X @ self.basis_

    def inverse_transform(self, coefficients):
        check_is_fitted(self, "basis_")
        return np.atleast_2d(coefficients) @ self.basis_.T


def _nndsvd_init(Y, q, rng):
    """Nonnegative double-SVD initialization with seeded |random| fill-in."""
    n_times, n_runs = Y.shape
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    basis = np.zeros((n_times, q))
    coeffs = np.zeros((q, n_runs))
    k = min(q, s.size)
    if k > 0 and s[0] > 0:
        basis[:, 0] = np.sqrt(s[0]) * np.abs(U[:, 0])
        coeffs[0, :] = np.sqrt(s[0]) * np.abs(Vt[0, :])
    for i in range(1, k):
        if s[i] <= 0:
            break
        u, v = U[:, i], Vt[i, :]
        up, un = np.maximum(u, 0), np.maximum(-u, 0)
        vp, vn = np.maximum(v, 0), np.maximum(-v, 0)
        norm_up, norm_vp = np.linalg.norm(up), np.linalg.norm(vp)
        norm_un, norm_vn = np.linalg.norm(un), np.linalg.norm(vn)
        if norm_up * norm_vp >= norm_un * norm_vn:
            part_u, part_v, weight = up, vp, norm_up * norm_vp
            norm_u, norm_v = norm_up, norm_vp
        else:
            part_u, part_v, weight = un, vn, norm_un * norm_vn
            norm_u, norm_v = norm_un, norm_vn
        if weight <= 0:
            continue
        scale = np.sqrt(s[i] * weight)
        basis[:, i] = scale * part_u / norm_u
        coeffs[i, :] = scale * part_v / norm_v
    # Columns the SVD could not seed get small nonnegative noise.
    mean_val = max(float(np.mean(Y)), 1e-12)
    for i in range(q):
        if not basis[:, i].any():
            basis[:, i] = mean_val * rng.random(n_times)
        if not coeffs[i, :].any():
            coeffs[i, :] = mean_val * rng.random(n_runs)
    return basis, coeffs


def _nnls_columns(design, targets, penalty):
    """Exact nonnegative least squares for each target column.

    Solves min_{x >= 0} ||design @ x - target||^2 + penalty * ||x||^2 via
    the Tikhonov-augmented system, with the Lawson–Hanson active-set
    solver so each subproblem is solved exactly.
    """
    n, q = design.shape
    if penalty > 0:
        augmented = np.vstack([design, np.sqrt(penalty) * np.eye(q)])
        pad = np.zeros(q)
    else:
        augmented = design
        pad = None
    out = np.empty((q, targets.shape[1]))
    for j in range(targets.shape[1]):
        rhs = targets[:, j] if pad is None else np.concatenate([targets[:, j], pad])
        out[:, j], _ = nnls(augmented, rhs)
    return out


class NmfFactorizer(BaseEstimator, TransformerMixin):
    """Regularized nonnegative matrix factorization by alternating NNLS.

    Minimizes ``||Y - basis @ coeffs||_F^2 + penalty_basis * ||basis||_F^2
    + penalty_coeffs * ||coeffs||_F^2`` subject to elementwise
    nonnegativity.  Each alternating subproblem is solved exactly, so the
    objective is nonincreasing across outer iterations.
    """

    method = "nmf"

    def __init__(
        self,
        n_components,
        penalty_basis=0.0,
        penalty_coeffs=0.0,
        max_iter=200,
        tol=1e-9,
        seed=0,
    ):
        self.n_components = n_components
        self.penalty_basis = penalty_basis
        self.penalty_coeffs = penalty_coeffs
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def _objective(self, Y, basis, coeffs):
        fit = np.linalg.norm(Y - basis @ coeffs, "fro") ** 2
        return (
            fit
            + self.penalty_basis * np.linalg.norm(basis, "fro") ** 2
            + self.penalty_coeffs * np.linalg.norm(coeffs, "fro") ** 2
        )

    def fit(self, X, y=None):
        X = as_float_array(X, name="training outputs", ndim=2)
        if np.any(X < 0):
            raise ConfigError("NMF requires elementwise nonnegative training outputs")
        if self.penalty_basis < 0 or self.penalty_coeffs < 0:
            raise ConfigError("regularization penalties must be nonnegative")
        n_runs, n_times = X.shape
        q = int(self.n_components)
        if not 1 <= q <= n_runs:
            raise ConfigError(f"n_components must be in [1, {n_runs}], got {q}")
        Y = X.T
        rng = np.random.default_rng(self.seed)
        basis, coeffs = _nndsvd_init(Y, q, rng)

        history = [self._objective(Y, basis, coeffs)]
        for _ in range(int(self.max_iter)):
            coeffs = _nnls_columns(basis, Y, self.penalty_coeffs)
            basis = _nnls_columns(coeffs.T, Y.T, self.penalty_basis).T
            history.append(self._objective(Y, basis, coeffs))
            previous, current = history[-2], history[-1]
            if previous - current <= self.tol * max(previous, 1e-300):
                break
        self.basis_ = basis
        self.coeffs_ = coeffs
        self.objective_ = history[-1]
        self.objective_history_ = np.asarray(history)
        self.n_iter_ = len(history) - 1
        self.training_error_ = float(np.linalg.norm(Y - basis @ coeffs, "fro"))
        return self

    def transform(self, X):
        """Nonnegative coefficients of new series (rows) in the fitted basis."""
        check_is_fitted(self, "basis_")
        X = as_float_array(np.atleast_2d(X), name="series", ndim=2)
        if X.shape[1] != self.basis_.shape[0]:
            raise ConfigError(
                f"series have {X.shape[1]} time points, basis has {self.basis_.shape[0]}"
            )
        return _nnls_columns(self.basis_, X.T, 0.0).T

    def inverse_transform(self, coefficients):
        check_is_fitted(self, "basis_")
        return np.atleast_2d(coefficients) @ self.basis_.T


def project_onto_basis(model, series):
    """Coefficient vector of a single time-major series column.

    SVD bases use the orthonormal projection; NMF bases solve a
    nonnegative least-squares problem.
    """
    series = as_float_array(series, name="series", ndim=1)
    return model.transform(series[None, :])[0]


def save_factor_model(model, directory):
    check_is_fitted(model, "basis_")
    os.makedirs(directory, exist_ok=True)
    q = model.basis_.shape[1]
    write_csv_matrix(
        os.path.join(directory, "basis.csv"),
        model.basis_,
        [f"phi_{i + 1}" for i in range(q)],
    )
    write_csv_matrix(
        os.path.join(directory, "coeffs.csv"),
        model.coeffs_,
        [f"run_{j + 1:04d}" for j in range(model.coeffs_.shape[1])],
    )
    meta = {"method": model.method, "n_components": q}
    if model.method == "svd":
        meta["singular_values"] = model.singular_values_.tolist()
    else:
        meta.update(
            penalty_basis=model.penalty_basis,
            penalty_coeffs=model.penalty_coeffs,
            objective=model.objective_,
            iterations=model.n_iter_,
            seed=model.seed,
        )
    meta["training_error"] = model.training_error_
    atomic_write(
        os.path.join(directory, "factor_meta.json"),
        lambda fh: json.dump(meta, fh, indent=1),
    )


def load_factor_model(directory):
    with open(os.path.join(directory, "factor_meta.json")) as fh:
        meta = json.load(fh)
    _, basis = read_csv_matrix(os.path.join(directory, "basis.csv"), "basis.csv")
    _, coeffs = read_csv_matrix(os.path.join(directory, "coeffs.csv"), "coeffs.csv")
    if meta["method"] == "svd":
        model = SvdFactorizer(n_components=meta["n_components"])
        model.singular_values_ = np.asarray(meta["singular_values"])
    else:
        model = NmfFactorizer(
            n_components=meta["n_components"],
            penalty_basis=meta["penalty_basis"],
            penalty_coeffs=meta["penalty_coeffs"],
            seed=meta["seed"],
        )
        model.objective_ = meta["objective"]
        model.n_iter_ = meta["iterations"]
    model.basis_ = basis
    model.coeffs_ = coeffs
    model.training_error_ = meta["training_error"]
    return model
