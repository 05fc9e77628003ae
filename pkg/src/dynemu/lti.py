"""Linear time-invariant stochastic-ODE building blocks.

A proxy is a small linear ODE ``ds/dt = A s + u(t) + xi(t)`` with white
noise ``xi``, observed through a row vector.  Its trajectory law is a
Gaussian process: the mean solves the noise-free ODE and the covariance
is the Green's-function transform of the noise covariance,

    cov(t, r) = e^{A t} S0 e^{A' r}
                + integral_0^{min(t,r)} e^{A (t-u)} S e^{A' (r-u)} du.

Scalar proxies (the workhorse) use closed forms throughout; matrix-valued
proxies fall back to matrix exponentials (scaling and squaring) and
adaptive Gauss–Legendre quadrature.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .exceptions import ConfigError, NumericalError
from .kernels import Kernel

# Relative half-width where the removable singularity of the closed-form
# noise integral switches to its series expansion.
_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True)
class PiecewiseConstantSignal:
    """Right-continuous step signal: values[k] holds on [times[k], times[k+1]).

    The last value extends beyond the final breakpoint.  ``times[0]`` must
    be 0 so the signal covers the whole integration range.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ConfigError("signal times must be a nonempty 1-d array")
        if times[0] != 0.0:
            raise ConfigError("signal must start at time 0")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ConfigError("signal times must be strictly increasing")
        if values.shape[0] != times.shape[0]:
            raise ConfigError("signal needs one value row per breakpoint")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value):
        return cls(times=np.zeros(1), values=np.asarray([value], dtype=float))

    def segment_index(self, t):
        return np.clip(
            np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1
        )


@dataclass(frozen=True)
class LtiProxy:
    """One linear ODE block of the emulator prior.

    ``system`` is the scalar decay rate (1-d proxies) or a (p, p) matrix.
    ``actuation`` is a piecewise-constant deterministic input, or None for
    the homogeneous equation.  ``observation`` maps the state to the
    emulated scalar (defaults to the first component).  ``noise_scale``
    multiplies the unit white-noise covariance.  ``proxy_params`` records
    the parameter vector the block was built from, if any.
    """

    system: object
    actuation: PiecewiseConstantSignal = None
    observation: np.ndarray = None
    initial_state: object = 0.0
    initial_cov: object = 0.0
    noise_scale: float = 1.0
    proxy_params: np.ndarray = None

    def __post_init__(self):
        A = np.asarray(self.system, dtype=float)
        if A.ndim == 0:
            object.__setattr__(self, "system", float(A))
        elif A.ndim == 2 and A.shape[0] == A.shape[1]:
            object.__setattr__(self, "system", A)
        else:
            raise ConfigError(f"system must be a scalar or square matrix, got shape {A.shape}")
        if self.dim > 1 and self.observation is None:
            obs = np.zeros(self.dim)
            obs[0] = 1.0
            object.__setattr__(self, "observation", obs)
        eigs = np.atleast_1d(np.linalg.eigvals(np.atleast_2d(A)))
        if np.any(eigs.real >= 0):
            warnings.warn(
                "proxy system is not strictly stable; stationary-limit "
                "diagnostics will not hold",
                stacklevel=2,
            )

    @property
    def dim(self):
        return 1 if np.isscalar(self.system) else self.system.shape[0]


def _actuation_segments(proxy):
    """Actuation breakpoints and per-segment value rows."""
    if proxy.actuation is None:
        return np.zeros(1), np.zeros((1, proxy.dim))
    sig = proxy.actuation
    values = sig.values if sig.values.ndim == 2 else sig.values[:, None]
    if values.shape[1] != proxy.dim:
        raise ConfigError(
            f"actuation has {values.shape[1]} components for a {proxy.dim}-d proxy"
        )
    return sig.times, values


def _scalar_segment_state(s0, a, u, dt):
    if a == 0.0:
        return s0 + u * dt
    return s0 * np.exp(a * dt) + (u / a) * np.expm1(a * dt)


def mean_function(proxy, times):
    """Noise-free trajectory of the proxy, observed, at the given times.

    Scalar proxies use the per-segment closed form; matrix proxies use
    matrix exponentials segment by segment.  Times must be nonnegative.
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(t < 0):
        raise ConfigError("mean function requires nonnegative times")
    order = np.argsort(t, kind="stable")
    t_sorted = t[order]
    edges, values = _actuation_segments(proxy)

    if proxy.dim == 1:
        a = float(proxy.system)
        obs = 1.0 if proxy.observation is None else float(np.asarray(proxy.observation).reshape(-1)[0])
        s0 = float(np.asarray(proxy.initial_state).reshape(-1)[0])
        u = values[:, 0]
        # March the state across segment breakpoints, then evaluate each
        # query inside its segment.
        seg_states = np.empty(len(edges))
        seg_states[0] = s0
        for k in range(len(edges) - 1):
            seg_states[k + 1] = _scalar_segment_state(
                seg_states[k], a, u[k], edges[k + 1] - edges[k]
            )
        out = np.empty_like(t_sorted)
        idx = np.clip(np.searchsorted(edges, t_sorted, side="right") - 1, 0, len(edges) - 1)
        for k in np.unique(idx):
            sel = idx == k
            dt = t_sorted[sel] - edges[k]
            if a == 0.0:
                out[sel] = seg_states[k] + u[k] * dt
            else:
                out[sel] = seg_states[k] * np.exp(a * dt) + (u[k] / a) * np.expm1(a * dt)
        result = np.empty_like(out)
        result[order] = obs * out
        if not np.all(np.isfinite(result)):
            raise NumericalError("non-finite proxy mean; check system stability")
        return result

    A = proxy.system
    p = proxy.dim
    s0 = np.asarray(proxy.initial_state, dtype=float).reshape(p)
    seg_states = [s0]
    for k in range(len(edges) - 1):
        dt = edges[k + 1] - edges[k]
        seg_states.append(_propagate_affine(A, seg_states[k], values[k], dt))
    out = np.empty_like(t_sorted)
    idx = np.clip(np.searchsorted(edges, t_sorted, side="right") - 1, 0, len(edges) - 1)
    for pos, tq in enumerate(t_sorted):
        k = idx[pos]
        state = _propagate_affine(A, seg_states[k], values[k], tq - edges[k])
        out[pos] = proxy.observation @ state
    result = np.empty_like(out)
    result[order] = out
    if not np.all(np.isfinite(result)):
        raise NumericalError("non-finite proxy mean; check system stability")
    return result


def _propagate_affine(A, state, u, dt):
    """Advance ds/dt = A s + u by dt via an augmented matrix exponential."""
    if dt == 0.0:
        return state
    p = A.shape[0]
    aug = np.zeros((p + 1, p + 1))
    aug[:p, :p] = A * dt
    aug[:p, p] = u * dt
    phi = expm(aug)
    return phi[:p, :p] @ state + phi[:p, p]


def _scalar_noise_integral(a_i, a_j, t, r):
    """Closed form of the white-noise double integral for scalar blocks.

    Returns integral_0^{min(t,r)} e^{a_i (t-u)} e^{a_j (r-u)} du written
    so that all exponents are nonpositive for stable systems (no
    overflow); the removable singularity at a_i + a_j = 0 uses a series.
    """
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    m = np.minimum(t, r)
    s = a_i + a_j
    expo_full = a_i * t + a_j * r
    expo_rest = a_i * (t - m) + a_j * (r - m)
    sm = s * m
    small = np.abs(sm) < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    direct = (np.exp(expo_full) - np.exp(expo_rest)) / s_safe
    series = np.exp(expo_rest) * m * (1.0 + sm / 2.0 + sm * sm / 6.0)
    return np.where(small, series, direct)


def scalar_covariance_grid(proxy_i, proxy_j, times_i, times_j, coupling_value=1.0,
                           include_initial_cov=None):
    """Covariance block between two scalar proxies on time grids.

    ``coupling_value`` is the parameter-kernel entry for this block pair
    (1 for the diagonal with identity noise).  The initial-condition term
    enters only for a proxy paired with itself, since distinct runs start
    independently.
    """
    if proxy_i.dim != 1 or proxy_j.dim != 1:
        raise ConfigError("scalar_covariance_grid requires 1-d proxies")
    ti = np.atleast_1d(np.asarray(times_i, dtype=float))[:, None]
    tj = np.atleast_1d(np.asarray(times_j, dtype=float))[None, :]
    a_i, a_j = float(proxy_i.system), float(proxy_j.system)
    obs_i = 1.0 if proxy_i.observation is None else float(np.asarray(proxy_i.observation).reshape(-1)[0])
    obs_j = 1.0 if proxy_j.observation is None else float(np.asarray(proxy_j.observation).reshape(-1)[0])
    cov = (
        obs_i
        * obs_j
        * coupling_value
        * proxy_i.noise_scale
        * proxy_j.noise_scale
        * _scalar_noise_integral(a_i, a_j, ti, tj)
    )
    if include_initial_cov is None:
        include_initial_cov = proxy_i is proxy_j
    if include_initial_cov:
        sigma0 = float(np.asarray(proxy_i.initial_cov).reshape(-1)[0])
        if sigma0 != 0.0:
            cov = cov + obs_i * obs_j * sigma0 * np.exp(a_i * ti + a_j * tj)
    if not np.all(np.isfinite(cov)):
        raise NumericalError("non-finite covariance value; check proxy stability")
    return cov


def _matrix_noise_integral(proxy_i, proxy_j, t, r, rtol=1e-10):
    """Adaptive Gauss–Legendre quadrature of the observed noise integral."""
    m = min(t, r)
    if m == 0.0:
        return 0.0
    A_i = np.atleast_2d(proxy_i.system)
    A_j = np.atleast_2d(proxy_j.system)
    c_i = proxy_i.observation
    c_j = proxy_j.observation

    def integrand(mu):
        v_i = c_i @ expm(A_i * (t - mu))
        v_j = c_j @ expm(A_j * (r - mu))
        return float(v_i @ v_j)

    nodes, weights = np.polynomial.legendre.leggauss(32)
    previous = None
    panels = 1
    for _ in range(9):
        total = 0.0
        edges = np.linspace(0.0, m, panels + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            half = 0.5 * (hi - lo)
            mids = 0.5 * (hi + lo) + half * nodes
            total += half * sum(w * integrand(mu) for w, mu in zip(weights, mids))
        if previous is not None and abs(total - previous) <= rtol * max(abs(total), 1e-300):
            return total
        previous = total
        panels *= 2
    return previous


def sde_covariance(proxy_i, proxy_j, t, r, coupling_value=1.0, include_initial_cov=None):
    """Observed covariance between two proxy blocks at times t and r."""
    t, r = float(t), float(r)
    if t < 0 or r < 0:
        raise ConfigError("covariance requires nonnegative times")
    if proxy_i.dim == 1 and proxy_j.dim == 1:
        return float(
            scalar_covariance_grid(
                proxy_i, proxy_j, [t], [r], coupling_value, include_initial_cov
            )[0, 0]
        )
    if proxy_i.dim != proxy_j.dim:
        raise ConfigError("proxy blocks must share the state dimension")
    value = (
        coupling_value
        * proxy_i.noise_scale
        * proxy_j.noise_scale
        * _matrix_noise_integral(proxy_i, proxy_j, t, r)
    )
    if include_initial_cov is None:
        include_initial_cov = proxy_i is proxy_j
    if include_initial_cov:
        S0 = np.asarray(proxy_i.initial_cov, dtype=float)
        if S0.ndim == 0:
            S0 = float(S0) * np.eye(proxy_i.dim)
        if np.any(S0 != 0.0):
            A_i = np.atleast_2d(proxy_i.system)
            A_j = np.atleast_2d(proxy_j.system)
            left = proxy_i.observation @ expm(A_i * t)
            right = expm(A_j * r).T @ proxy_j.observation
            value = value + float(left @ S0 @ right)
    if not np.isfinite(value):
        raise NumericalError("non-finite covariance value; check proxy stability")
    return float(value)


class SdeKernel(Kernel):
    """Kernel over (block index, time) pairs induced by a set of proxies.

    Inputs are rows ``[index, t]``; the coupling matrix supplies the
    parameter-kernel value for each block pair.  Used to expose the
    stochastic-ODE covariance through the generic GP machinery.
    """

    def __init__(self, proxies, coupling_matrix=None):
        self.proxies = list(proxies)
        n = len(self.proxies)
        if coupling_matrix is None:
            coupling_matrix = np.eye(n)
        self.coupling_matrix = np.asarray(coupling_matrix, dtype=float)
        if self.coupling_matrix.shape != (n, n):
            raise ConfigError(
                f"coupling matrix must be {n}x{n}, got {self.coupling_matrix.shape}"
            )

    def __call__(self, X, X2=None):
        X = np.atleast_2d(X)
        X2v = X if X2 is None else np.atleast_2d(X2)
        out = np.empty((X.shape[0], X2v.shape[0]))
        for a, (bi, ti) in enumerate(X):
            for b, (bj, tj) in enumerate(X2v):
                i, j = int(bi), int(bj)
                out[a, b] = sde_covariance(
                    self.proxies[i],
                    self.proxies[j],
                    ti,
                    tj,
                    coupling_value=self.coupling_matrix[i, j],
                    include_initial_cov=(i == j),
                )
        return out

    def diag(self, X):
        X = np.atleast_2d(X)
        return np.array(
            [
                sde_covariance(
                    self.proxies[int(b)],
                    self.proxies[int(b)],
                    t,
                    t,
                    coupling_value=self.coupling_matrix[int(b), int(b)],
                    include_initial_cov=True,
                )
                for b, t in X
            ]
        )

    @property
    def theta(self):
        return np.empty(0)

    @theta.setter
    def theta(self, value):
        if np.asarray(value).size:
            raise ConfigError("SdeKernel exposes no free log-parameters")

    def theta_bounds(self):
        return []
