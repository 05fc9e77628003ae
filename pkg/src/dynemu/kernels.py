"""Covariance functions for Gaussian-process regression.

Stationary kernels (squared exponential, Matérn) with per-dimension
lengthscales, plus sum/product/scale combinators.  Hyperparameters are
exposed as a flat log-parameter vector ``theta`` so optimizers can search
in log space.
"""

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import ConfigError


def _as_lengthscales(lengthscales):
    ell = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if np.any(ell <= 0):
        raise ConfigError(f"lengthscales must be > 0, got {ell}")
    return ell


def _scaled_inputs(X, lengthscales):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ell = _as_lengthscales(lengthscales)
    if ell.size == 1:
        return X / ell[0]
    if ell.size != X.shape[1]:
        raise ConfigError(
            f"got {ell.size} lengthscales for {X.shape[1]}-dimensional inputs"
        )
    return X / ell[None, :]


class Kernel:
    """Base class: callable Gram evaluation plus log-parameter plumbing."""

    def __call__(self, X, X2=None):
        raise NotImplementedError

    def diag(self, X):
        X = np.atleast_2d(X)
        return np.array([self(row[None, :])[0, 0] for row in X])

    @property
    def theta(self):
        """Flat vector of log-transformed hyperparameters."""
        raise NotImplementedError

    @theta.setter
    def theta(self, value):
        raise NotImplementedError

    def theta_bounds(self):
        """Default log-space search bounds, one (lo, hi) pair per entry."""
        raise NotImplementedError

    def clone_with_theta(self, theta):
        import copy

        new = copy.deepcopy(self)
        new.theta = np.asarray(theta, dtype=float)
        return new

    def __add__(self, other):
        return Sum(self, other)

    def __mul__(self, other):
        return Product(self, other)


def _relative_bounds(value, factor):
    center = np.log(max(float(value), 1e-300))
    return (center - np.log(factor), center + np.log(factor))


def _stationary_bounds(variance, lengthscales):
    # Search windows centered on the current setting: three decades for the
    # signal variance; lengthscales two decades down but only one up, since
    # much longer scales make the kernel numerically constant over the data
    # and push the likelihood onto a degenerate ridge.
    bounds = [_relative_bounds(variance, 1e3)]
    center = [np.log(max(float(ell), 1e-300)) for ell in np.atleast_1d(lengthscales)]
    bounds += [(c - np.log(1e2), c + np.log(1e1)) for c in center]
    return bounds


class SquaredExponential(Kernel):
    """k(x, x') = variance * exp(-0.5 * sum_d ((x_d - x'_d)/ell_d)^2)."""

    def __init__(self, variance=1.0, lengthscales=1.0):
        self.variance = float(variance)
        self.lengthscales = _as_lengthscales(lengthscales)

    def __call__(self, X, X2=None):
        Xs = _scaled_inputs(X, self.lengthscales)
        X2s = Xs if X2 is None else _scaled_inputs(X2, self.lengthscales)
        d2 = cdist(Xs, X2s, metric="sqeuclidean")
        return self.variance * np.exp(-0.5 * d2)

    def diag(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.variance)

    @property
    def theta(self):
        return np.log(np.concatenate([[self.variance], self.lengthscales]))

    @theta.setter
    def theta(self, value):
        value = np.exp(np.asarray(value, dtype=float))
        self.variance = float(value[0])
        self.lengthscales = value[1:].copy()

    def theta_bounds(self):
        return _stationary_bounds(self.variance, self.lengthscales)


class Matern(Kernel):
    """Matérn kernel with smoothness order in {1/2, 3/2, 5/2}.

    Order 1/2 coincides with the exponential kernel
    ``variance * exp(-r)`` in the scaled distance r.
    """

    _ORDERS = (0.5, 1.5, 2.5)

    def __init__(self, order=1.5, variance=1.0, lengthscales=1.0):
        if order not in self._ORDERS:
            raise ConfigError(f"Matern order must be one of {self._ORDERS}, got {order}")
        self.order = float(order)
        self.variance = float(variance)
        self.lengthscales = _as_lengthscales(lengthscales)

    def __call__(self, X, X2=None):
        Xs = _scaled_inputs(X, self.lengthscales)
        X2s = Xs if X2 is None else _scaled_inputs(X2, self.lengthscales)
        r = cdist(Xs, X2s, metric="euclidean")
        if self.order == 0.5:
            return self.variance * np.exp(-r)
        if self.order == 1.5:
            z = np.sqrt(3.0) * r
            return self.variance * (1.0 + z) * np.exp(-z)
        z = np.sqrt(5.0) * r
        return self.variance * (1.0 + z + z**2 / 3.0) * np.exp(-z)

    def diag(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.variance)

    @property
    def theta(self):
        return np.log(np.concatenate([[self.variance], self.lengthscales]))

    @theta.setter
    def theta(self, value):
        value = np.exp(np.asarray(value, dtype=float))
        self.variance = float(value[0])
        self.lengthscales = value[1:].copy()

    def theta_bounds(self):
        return _stationary_bounds(self.variance, self.lengthscales)


class Sum(Kernel):
    def __init__(self, left, right):
        self.left = left
        self.right = right

    def __call__(self, X, X2=None):
        return self.left(X, X2) + self.right(X, X2)

    def diag(self, X):
        return self.left.diag(X) + self.right.diag(X)

    @property
    def theta(self):
        return np.concatenate([self.left.theta, self.right.theta])

    @theta.setter
    def theta(self, value):
        n_left = self.left.theta.size
        self.left.theta = value[:n_left]
        self.right.theta = value[n_left:]

    def theta_bounds(self):
        return self.left.theta_bounds() + self.right.theta_bounds()


class Product(Kernel):
    def __init__(self, left, right):
        self.left = left
        self.right = right

    def __call__(self, X, X2=None):
        return self.left(X, X2) * self.right(X, X2)

    def diag(self, X):
        return self.left.diag(X) * self.right.diag(X)

    @property
    def theta(self):
        return np.concatenate([self.left.theta, self.right.theta])

    @theta.setter
    def theta(self, value):
        n_left = self.left.theta.size
        self.left.theta = value[:n_left]
        self.right.theta = value[n_left:]

    def theta_bounds(self):
        return self.left.theta_bounds() + self.right.theta_bounds()


class Scaled(Kernel):
    """Fixed positive multiple of another kernel."""

    def __init__(self, kernel, factor):
        if factor <= 0:
            raise ConfigError(f"scale factor must be > 0, got {factor}")
        self.kernel = kernel
        self.factor = float(factor)

    def __call__(self, X, X2=None):
        return self.factor * self.kernel(X, X2)

    def diag(self, X):
        return self.factor * self.kernel.diag(X)

    @property
    def theta(self):
        return self.kernel.theta

    @theta.setter
    def theta(self, value):
        self.kernel.theta = value

    def theta_bounds(self):
        return self.kernel.theta_bounds()


def kernel_to_dict(kernel):
    """JSON-serializable description, inverse of :func:`kernel_from_dict`."""
    if isinstance(kernel, SquaredExponential):
        return {
            "family": "squared_exponential",
            "variance": kernel.variance,
            "lengthscales": kernel.lengthscales.tolist(),
        }
    if isinstance(kernel, Matern):
        return {
            "family": "matern",
            "order": kernel.order,
            "variance": kernel.variance,
            "lengthscales": kernel.lengthscales.tolist(),
        }
    if isinstance(kernel, Scaled):
        return {"family": "scaled", "factor": kernel.factor, "kernel": kernel_to_dict(kernel.kernel)}
    if isinstance(kernel, (Sum, Product)):
        return {
            "family": "sum" if isinstance(kernel, Sum) else "product",
            "left": kernel_to_dict(kernel.left),
            "right": kernel_to_dict(kernel.right),
        }
    raise ConfigError(f"cannot serialize kernel of type {type(kernel).__name__}")


def kernel_from_dict(spec):
    family = spec.get("family")
    if family == "squared_exponential":
        return SquaredExponential(spec["variance"], spec["lengthscales"])
    if family == "matern":
        return Matern(spec["order"], spec["variance"], spec["lengthscales"])
    if family == "scaled":
        return Scaled(kernel_from_dict(spec["kernel"]), spec["factor"])
    if family == "sum":
        return Sum(kernel_from_dict(spec["left"]), kernel_from_dict(spec["right"]))
    if family == "product":
        return Product(kernel_from_dict(spec["left"]), kernel_from_dict(spec["right"]))
    raise ConfigError(f"unknown kernel family {family!r}")
