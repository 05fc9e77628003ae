"""Gaussian-process regression engine.

Conditioning computes the weight vector alpha = (K + kappa*I)^{-1} (y - m)
through a Cholesky factorization with jitter escalation, followed by
safeguarded iterative refinement so the linear-system residual stays far
below the interpolation tolerances.  The default regularization ``nugget``
is the machine epsilon, which makes the posterior mean interpolate
noiseless simulator outputs.
"""

import warnings

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError
from scipy.optimize import minimize
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, FactorizationFailure, NumericalError
from .kernels import SquaredExponential, kernel_from_dict, kernel_to_dict
from .validation import as_2d_params, as_float_array

MACHINE_EPS = float(np.finfo(np.float64).eps)

# Pairwise duplicate-input check is O(n^2); skipped above this size.
_DUPLICATE_CHECK_LIMIT = 4000


def _factor_is_singular(L):
    """Detect a Cholesky factor whose trailing pivots are roundoff noise.

    A slightly indefinite Gram can pass LAPACK's factorization with tiny
    (garbage) pivots; solves through such a factor diverge.
    """
    diag = np.diagonal(L)
    smallest, largest = float(np.min(diag)), float(np.max(diag))
    return smallest <= 0 or smallest**2 <= diag.size * MACHINE_EPS * largest**2


def solve_psd_system(K, rhs, nugget):
    """Solve (K + jitter*I) x = rhs with escalating jitter.

    Starts at ``max(nugget, machine epsilon)`` and multiplies by 10 until
    the Cholesky factorization succeeds with trustworthy pivots, capped at
    1e-4 times the mean Gram diagonal.  Returns (solution, lower Cholesky
    factor, jitter used).
    """
    K = np.asarray(K)
    n = K.shape[0]
    mean_diag = float(np.mean(np.diagonal(K)))
    cap = 1e-4 * max(mean_diag, MACHINE_EPS)
    jitter = max(float(nugget), MACHINE_EPS)
    idx = np.diag_indices(n)
    while True:
        Kj = K.copy()
        Kj[idx] += jitter
        try:
            L = cholesky(Kj, lower=True)
            if not _factor_is_singular(L):
                break
        except LinAlgError:
            pass
        if jitter >= cap:
            eigs = np.linalg.eigvalsh(Kj)
            cond = float(np.max(eigs) / max(np.min(eigs), MACHINE_EPS))
            raise FactorizationFailure(
                f"Gram factorization failed at maximum jitter {jitter:.3e} "
                f"(condition estimate {cond:.3e}); the time grid may be "
                f"oversampled for this kernel",
                condition_estimate=cond,
            )
        jitter = min(jitter * 10.0, cap)
    x = solve_triangular(L, solve_triangular(L, rhs, lower=True), lower=True, trans=1)
    # Safeguarded iterative refinement: cheap O(n^2) sweeps that keep the
    # best solution seen, so an ill-conditioned factor can only improve the
    # residual, never destroy it.
    rhs_norm = max(float(np.linalg.norm(rhs)), 1e-300)
    best_norm = float(np.linalg.norm(rhs - Kj @ x))
    for _ in range(4):
        if best_norm <= 1e-10 * rhs_norm:
            break
        residual = rhs - Kj @ x
        candidate = x + solve_triangular(
            L, solve_triangular(L, residual, lower=True), lower=True, trans=1
        )
        candidate_norm = float(np.linalg.norm(rhs - Kj @ candidate))
        if candidate_norm >= best_norm:
            break
        x, best_norm = candidate, candidate_norm
    return x, L, jitter


def _mean_values(mean, X, y=None, fitted_constant=None):
    if mean is None or mean == "zero":
        return np.zeros(X.shape[0])
    if mean == "constant":
        const = float(np.mean(y)) if fitted_constant is None else fitted_constant
        return np.full(X.shape[0], const)
    if callable(mean):
        values = np.asarray(mean(X), dtype=float).reshape(-1)
        if values.shape[0] != X.shape[0]:
            raise ConfigError("mean function returned wrong number of values")
        return values
    raise ConfigError(f"unsupported mean specification {mean!r}")


def log_marginal_likelihood(kernel, X, y, mean="zero", nugget=None):
    """Gaussian log marginal likelihood of targets under the kernel prior.

    Uses the requested nugget strictly, with no jitter escalation: during
    hyperparameter search an ill-conditioned Gram must be rejected, not
    silently regularized into a different model.
    """
    X = as_2d_params(X, name="inputs")
    y = as_float_array(y, name="targets", ndim=1)
    nugget = MACHINE_EPS if nugget is None else max(float(nugget), MACHINE_EPS)
    resid = y - _mean_values(mean, X, y=y)
    K = kernel(X)
    K[np.diag_indices_from(K)] += nugget
    try:
        L = cholesky(K, lower=True)
    except LinAlgError as exc:
        raise FactorizationFailure(
            f"Gram factorization failed at nugget {nugget:.3e}"
        ) from exc
    if _factor_is_singular(L):
        raise FactorizationFailure("Gram matrix is numerically singular")
    alpha = solve_triangular(L, solve_triangular(L, resid, lower=True), lower=True, trans=1)
    quad = float(resid @ alpha)
    if not np.isfinite(quad) or quad < 0:
        # A PD solve cannot give a negative quadratic form; this is
        # roundoff from a numerically indefinite Gram.
        raise FactorizationFailure("Gram matrix is numerically indefinite")
    half_logdet = float(np.sum(np.log(np.diagonal(L))))
    return float(-0.5 * quad - half_logdet - 0.5 * len(y) * np.log(2.0 * np.pi))


def optimize_hyperparams(
    kernel, X, y, bounds=None, n_restarts=4, seed=0, mean="zero", nugget=None
):
    """Multi-start Nelder–Mead search over log hyperparameters.

    The first start is the kernel's current setting; the remaining
    ``n_restarts - 1`` are drawn uniformly inside the bounds with a
    generator keyed by ``seed``.  Returns (best kernel, best LML); the
    reported LML is never below the LML of any start point.
    """
    X = as_2d_params(X, name="inputs")
    y = as_float_array(y, name="targets", ndim=1)
    if n_restarts < 1:
        raise ConfigError(f"n_restarts must be >= 1, got {n_restarts}")
    theta0 = kernel.theta
    if bounds is None:
        bounds = kernel.theta_bounds()
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    if len(bounds) != theta0.size:
        raise ConfigError(
            f"got {len(bounds)} bounds for {theta0.size} hyperparameters"
        )
    if not all(np.isfinite(lo) and np.isfinite(hi) and lo < hi for lo, hi in bounds):
        raise ConfigError("hyperparameter bounds must be finite with lo < hi")

    def negative_lml(theta):
        try:
            trial = kernel.clone_with_theta(theta)
            return -log_marginal_likelihood(trial, X, y, mean=mean, nugget=nugget)
        except (FactorizationFailure, FloatingPointError, np.linalg.LinAlgError):
            return np.inf

    rng = np.random.default_rng(seed)
    lows = np.array([b[0] for b in bounds])
    highs = np.array([b[1] for b in bounds])
    starts = [np.clip(theta0, lows, highs)]
    for _ in range(n_restarts - 1):
        starts.append(rng.uniform(lows, highs))
    # Last-resort start at the shortest lengthscales: the Gram is close to
    # diagonal there, so it factorizes even when every other start fails.
    fallback = np.clip(theta0, lows, highs).copy()
    fallback[1:] = lows[1:]
    starts.append(fallback)

    best_theta, best_lml = None, -np.inf
    for start in starts:
        start_lml = -negative_lml(start)
        if start_lml > best_lml:
            best_theta, best_lml = start, start_lml
        if not np.isfinite(start_lml):
            continue
        result = minimize(
            negative_lml,
            start,
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 200 * len(start)},
        )
        if np.isfinite(result.fun) and -result.fun > best_lml:
            best_theta, best_lml = result.x, -result.fun
    if best_theta is None or not np.isfinite(best_lml):
        raise NumericalError("hyperparameter search produced no finite likelihood")
    return kernel.clone_with_theta(best_theta), float(best_lml)


class GaussianProcess(BaseEstimator, RegressorMixin):
    """GP regressor with exact conditioning.

    Parameters
    ----------
    kernel : Kernel, optional
        Prior covariance; defaults to a unit squared-exponential with one
        lengthscale per input dimension (set at fit time).
    mean : {"zero", "constant"} or callable
        Prior mean.  "constant" fits the training mean; a callable is
        evaluated on the raw (unstandardized) inputs.
    nugget : float, optional
        Regularization added to the Gram diagonal; defaults to machine
        epsilon (interpolation of noiseless data).
    standardize : bool
        Standardize inputs per dimension before kernel evaluation.
    optimize : bool
        Maximize the log marginal likelihood over kernel hyperparameters
        during fit.
    n_restarts, seed, bounds
        Passed to :func:`optimize_hyperparams`.
    """

    def __init__(
        self,
        kernel=None,
        mean="constant",
        nugget=None,
        standardize=True,
        optimize=False,
        n_restarts=4,
        seed=0,
        bounds=None,
    ):
        self.kernel = kernel
        self.mean = mean
        self.nugget = nugget
        self.standardize = standardize
        self.optimize = optimize
        self.n_restarts = n_restarts
        self.seed = seed
        self.bounds = bounds

    def _standardized(self, X):
        if not self.standardize:
            return X
        return (X - self.X_offset_) / self.X_scale_

    def fit(self, X, y):
        X = as_2d_params(X, name="X")
        y = as_float_array(y, name="y", ndim=1)
        if X.shape[0] != y.shape[0]:
            raise ConfigError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        if X.shape[0] <= _DUPLICATE_CHECK_LIMIT and X.shape[0] > 1:
            if float(np.min(pdist(X))) < 1e-10:
                warnings.warn(
                    "training inputs contain a pair closer than 1e-10; "
                    "conditioning may be ill-posed",
                    stacklevel=2,
                )
        if self.standardize:
            self.X_offset_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.X_scale_ = np.where(scale > 0, scale, 1.0)
        self.X_train_ = X
        Xs = self._standardized(X)

        self.mean_constant_ = float(np.mean(y)) if self.mean == "constant" else None
        mean_train = _mean_values(self.mean, X, y=y, fitted_constant=self.mean_constant_)
        resid = y - mean_train

        kernel = self.kernel
        if kernel is None:
            kernel = SquaredExponential(
                variance=max(float(np.var(resid)), 1e-12),
                lengthscales=np.ones(X.shape[1]),
            )
        if self.optimize:
            kernel, self.lml_ = optimize_hyperparams(
                kernel,
                Xs,
                resid,
                bounds=self.bounds,
                n_restarts=self.n_restarts,
                seed=self.seed,
                mean="zero",
                nugget=self.nugget,
            )
        self.kernel_ = kernel

        nugget = MACHINE_EPS if self.nugget is None else float(self.nugget)
        K = kernel(Xs)
        self.alpha_, self.L_, self.nugget_ = solve_psd_system(K, resid, nugget)
        self.y_train_ = y
        if not self.optimize:
            half_logdet = float(np.sum(np.log(np.diagonal(self.L_))))
            self.lml_ = float(
                -0.5 * resid @ self.alpha_
                - half_logdet
                - 0.5 * len(y) * np.log(2.0 * np.pi)
            )
        return self

    def predict(self, X, return_var=False):
        """Posterior mean (and, optionally, pointwise variance)."""
        check_is_fitted(self, "alpha_")
        X = as_2d_params(X, name="X")
        if X.shape[1] != self.X_train_.shape[1]:
            raise ConfigError(
                f"query inputs have {X.shape[1]} dimensions, expected "
                f"{self.X_train_.shape[1]}"
            )
        Xs = self._standardized(X)
        Xs_train = self._standardized(self.X_train_)
        K_cross = self.kernel_(Xs, Xs_train)
        mean = K_cross @ self.alpha_ + _mean_values(
            self.mean, X, fitted_constant=self.mean_constant_
        )
        if not return_var:
            return mean
        v = solve_triangular(self.L_, K_cross.T, lower=True)
        var = self.kernel_.diag(Xs) - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self):
        check_is_fitted(self, "lml_")
        return self.lml_


def save_gp(gp, directory, prefix="gp"):
    """Persist a fitted GP (zero/constant means only) to a directory."""
    import json
    import os

    from .dataset import atomic_write, write_csv_matrix

    check_is_fitted(gp, "alpha_")
    if callable(gp.mean):
        raise ConfigError("GPs with callable mean functions are not serializable")
    os.makedirs(directory, exist_ok=True)
    meta = {
        "kernel": kernel_to_dict(gp.kernel_),
        "mean": gp.mean,
        "mean_constant": gp.mean_constant_,
        "nugget": gp.nugget_,
        "standardize": gp.standardize,
        "X_offset": gp.X_offset_.tolist() if gp.standardize else None,
        "X_scale": gp.X_scale_.tolist() if gp.standardize else None,
    }
    atomic_write(
        os.path.join(directory, f"{prefix}_meta.json"),
        lambda fh: json.dump(meta, fh, indent=1),
    )
    write_csv_matrix(
        os.path.join(directory, f"{prefix}_alpha.csv"), gp.alpha_.reshape(-1, 1), ["alpha"]
    )
    cols = [f"x{i}" for i in range(gp.X_train_.shape[1])]
    write_csv_matrix(os.path.join(directory, f"{prefix}_train_inputs.csv"), gp.X_train_, cols)


def load_gp(directory, prefix="gp"):
    """Rebuild a fitted GP saved by :func:`save_gp`."""
    import json
    import os

    from .dataset import read_csv_matrix

    with open(os.path.join(directory, f"{prefix}_meta.json")) as fh:
        meta = json.load(fh)
    _, alpha = read_csv_matrix(os.path.join(directory, f"{prefix}_alpha.csv"), "alpha")
    _, X_train = read_csv_matrix(
        os.path.join(directory, f"{prefix}_train_inputs.csv"), "train inputs"
    )
    gp = GaussianProcess(
        kernel=kernel_from_dict(meta["kernel"]),
        mean=meta["mean"],
        nugget=meta["nugget"],
        standardize=meta["standardize"],
    )
    gp.kernel_ = kernel_from_dict(meta["kernel"])
    gp.alpha_ = alpha[:, 0]
    gp.X_train_ = X_train
    gp.mean_constant_ = meta["mean_constant"]
    gp.nugget_ = meta["nugget"]
    if meta["standardize"]:
        gp.X_offset_ = np.asarray(meta["X_offset"], dtype=float)
        gp.X_scale_ = np.asarray(meta["X_scale"], dtype=float)
    Xs = gp._standardized(X_train)
    gp.L_ = cholesky(
        gp.kernel_(Xs) + gp.nugget_ * np.eye(X_train.shape[0]), lower=True
    )
    gp.y_train_ = None
    gp.lml_ = None
    return gp
