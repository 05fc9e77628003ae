"""Output warping for mechanistic emulators.

A saturating simulator can often be approximated by a static nonlinearity
applied to a linear latent trajectory (a Wiener model).  Here the
nonlinearity is the affine-tanh family

    observed = scale * tanh(gain * latent + shift)

fitted per run jointly with the run's linear proxy by alternating
minimization: invert the current warp, refit the proxy on the latent
series, then refit the warp against the proxy trajectory.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .exceptions import ConfigError
from .validation import as_float_array

# Gains below this magnitude make the warp numerically non-invertible.
_MIN_GAIN = 1e-8


@dataclass
class WarpSpec:
    """Per-run affine-tanh warp parameters.

    ``params`` rows are (scale, gain, shift); runs flagged in
    ``identity_mask`` fall back to the identity warp (degenerate fits).
    """

    params: np.ndarray
    identity_mask: np.ndarray
    family: str = "tanh"

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        if self.params.shape[1] != 3:
            raise ConfigError("warp params must have three columns (scale, gain, shift)")
        self.identity_mask = np.asarray(self.identity_mask, dtype=bool).reshape(-1)
        if self.identity_mask.shape[0] != self.params.shape[0]:
            raise ConfigError("identity mask length must match params rows")

    @property
    def n_runs(self):
        return self.params.shape[0]


def warp_apply(params, latent):
    """Forward warp: latent trajectory to observed scale."""
    scale, gain, shift = params
    return scale * np.tanh(gain * np.asarray(latent, dtype=float) + shift)


def warp_invert(params, observed):
    """Inverse warp; defined where |observed| < |scale|."""
    scale, gain, shift = params
    if abs(gain) < _MIN_GAIN:
        raise ConfigError(f"warp gain {gain!r} is too small to invert")
    ratio = np.asarray(observed, dtype=float) / scale
    if np.any(np.abs(ratio) >= 1.0):
        raise ConfigError("observed values exceed the invertible range of the warp")
    return (np.arctanh(ratio) - shift) / gain


def _refit_warp_params(params0, latent, observed, scale, fit_gain):
    if fit_gain:
        def residual(p):
            return warp_apply((scale, p[0], p[1]), latent) - observed

        bounds = ([-50.0, -10.0], [50.0, 10.0])
    else:
        def residual(p):
            return warp_apply((scale, 1.0, p[0]), latent) - observed

        bounds = ([-10.0], [10.0])
    result = least_squares(
        residual, params0, bounds=bounds, xtol=1e-12, ftol=1e-12, max_nfev=400
    )
    return result.x


def fit_warped_proxy(times, observed, fit_latent, rounds=10, scale=None, fit_gain=False):
    """Alternating warp + proxy fit for a single run.

    Two identifiability conventions keep the per-run parameters on a
    common, interpolable scale: the outer scale is fixed (per dataset when
    fitting a matrix, else slightly above the run's peak), and the gain is
    locked at 1 unless ``fit_gain`` is set — when the proxy starts from a
    zero state its response is linear in the actuation gains, so a free
    warp gain is redundant with the proxy scale and the joint fit breaks
    the tie arbitrarily run by run.

    Parameters
    ----------
    times : array, shape (n_times,)
    observed : array, shape (n_times,)
        Simulator output for this run.
    fit_latent : callable
        ``fit_latent(latent) -> (psi, predicted_latent)`` refits the linear
        proxy against a latent series and returns its parameters and
        trajectory on ``times``.
    rounds : int
        Number of outer alternating rounds.
    scale : float, optional
        Fixed outer scale; must exceed the peak magnitude of ``observed``.
    fit_gain : bool
        Also optimize the inner gain (needed only when a nonzero initial
        state makes the gain identifiable).

    Returns
    -------
    params : ndarray (3,) or None
        Fitted (scale, gain, shift); None when the run degenerates to the
        identity warp.
    psi : ndarray
        Proxy parameters fitted against the final latent series.
    info : dict with "identity" and "residual".
    """
    observed = as_float_array(observed, name="observed series", ndim=1)
    peak = float(np.max(np.abs(observed)))
    if peak == 0.0 or np.ptp(observed) == 0.0:
        psi, _ = fit_latent(observed)
        return None, psi, {"identity": True, "residual": 0.0}
    if scale is None:
        scale = 1.02 * peak
    elif scale <= peak:
        raise ConfigError(
            f"warp scale {scale!r} must exceed the observed peak {peak!r}"
        )

    free = np.array([1.0, 0.0]) if fit_gain else np.array([0.0])
    psi = None
    for _ in range(int(rounds)):
        gain, shift = (free[0], free[1]) if fit_gain else (1.0, free[0])
        latent = warp_invert((scale, gain, shift), observed)
        psi, predicted = fit_latent(latent)
        free = _refit_warp_params(free, predicted, observed, scale, fit_gain)
        if fit_gain and abs(free[0]) < _MIN_GAIN:
            break
    gain, shift = (free[0], free[1]) if fit_gain else (1.0, free[0])
    if psi is None or abs(gain) < _MIN_GAIN:
        psi, predicted = fit_latent(observed)
        return None, psi, {"identity": True, "residual": float(np.nan)}
    params = np.array([scale, gain, shift])
    _, predicted = fit_latent(warp_invert(params, observed))
    residual = float(np.sqrt(np.mean((warp_apply(params, predicted) - observed) ** 2)))
    return params, psi, {"identity": False, "residual": residual}


def warp_fit(Y_rows, times, fit_latent_factory, rounds=10, fit_gain=False):
    """Fit per-run warps for a whole output matrix.

    The outer scale is shared by all runs (slightly above the global peak)
    so the per-run shifts and proxy gains live on a common scale.
    ``fit_latent_factory(run_index)`` returns the per-run latent fitter
    passed to :func:`fit_warped_proxy`.  Returns a :class:`WarpSpec`, the
    matrix of proxy parameters, and the per-run info dicts.
    """
    Y_rows = np.atleast_2d(np.asarray(Y_rows, dtype=float))
    n_runs = Y_rows.shape[0]
    scale = 1.02 * float(np.max(np.abs(Y_rows))) if Y_rows.size else 1.0
    params = np.zeros((n_runs, 3))
    identity = np.zeros(n_runs, dtype=bool)
    psis = []
    infos = []
    for i in range(n_runs):
        row_params, psi, info = fit_warped_proxy(
            times, Y_rows[i], fit_latent_factory(i), rounds=rounds,
            scale=scale if scale > 0 else None, fit_gain=fit_gain,
        )
        if row_params is None:
            identity[i] = True
        else:
            params[i] = row_params
        psis.append(psi)
        infos.append(info)
    return WarpSpec(params=params, identity_mask=identity), np.asarray(psis), infos
