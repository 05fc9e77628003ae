"""Synthetic data generators.

Two families of simulators are bundled:

* A didactic scalar system whose time evolution is linear but whose
  coefficients depend nonlinearly on the initial condition.  Trajectories
  have a closed form, and an optional Gaussian mixing over neighboring
  initial conditions produces a smoothed variant that couples runs.
* A toy nonlinear-reservoir catchment driven by block rain events,
  integrated with fixed-step RK4.  It stands in for full hydrodynamic
  sewer simulators at desk scale: nonlinear storage, saturation at the
  time of concentration, and slow recession.
"""

import numpy as np
from dataclasses import dataclass

from .dataset import TimeSeriesDataset
from .exceptions import ConfigError, NumericalError
from .validation import check_nonnegative, check_positive, check_strictly_increasing


# ---------------------------------------------------------------------------
# Didactic nonlinear-coefficient linear system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonlinearDsConfig:
    """Configuration of the didactic dataset generator.

    ``smoothing_sigma = 0`` yields the raw closed-form trajectories;
    ``smoothing_sigma > 0`` mixes neighboring trajectories with a Gaussian
    kernel of that standard deviation over the initial condition.
    """

    a0: float = 12.616
    a1: float = 5.0
    b0: float = 2.0
    n_runs: int = 200
    x0_range: tuple = (-1.0, 1.0)
    n_times: int = 40
    t_end: float = 1.0
    smoothing_sigma: float = 0.0
    quad_nodes: int = 41

    def validate(self):
        check_positive(self.a0, "a0")
        check_positive(self.t_end, "t_end")
        check_nonnegative(self.smoothing_sigma, "smoothing_sigma")
        if self.n_runs < 2:
            raise ConfigError(f"n_runs must be >= 2, got {self.n_runs}")
        if self.n_times < 2:
            raise ConfigError(f"n_times must be >= 2, got {self.n_times}")
        if self.quad_nodes < 1:
            raise ConfigError(f"quad_nodes must be >= 1, got {self.quad_nodes}")


def trajectory_decay_rate(x, a0=12.616, a1=5.0):
    """Decay rate of the linear evolution as a function of initial condition.

    Always strictly negative for ``a0 > 0``.  ``sign(0)`` is taken as 0.
    """
    x = np.asarray(x, dtype=float)
    return -a0 * np.exp(-a1 * (x - np.sign(x)) ** 2)


def trajectory_offset(x, b0=2.0):
    """Constant forcing of the linear evolution as a function of x0."""
    return b0 * np.tanh(np.asarray(x, dtype=float))


def closed_form_trajectories(x0, times, config=None):
    """Exact solutions of ``dx/dt = decay(x0) x + offset(x0)``, ``x(0) = x0``.

    Parameters
    ----------
    x0 : array_like, shape (n_runs,)
        Initial conditions (each run keeps its own frozen coefficients).
    times : array_like, shape (n_times,)
    config : NonlinearDsConfig, optional
        Supplies the coefficient constants; defaults are used if omitted.

    Returns
    -------
    ndarray, shape (n_times, n_runs)
    """
    cfg = config or NonlinearDsConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    t = np.asarray(times, dtype=float)
    a = trajectory_decay_rate(x0, cfg.a0, cfg.a1)
    b = trajectory_offset(x0, cfg.b0)
    if np.any(a == 0):
        raise NumericalError("degenerate decay rate a=0 encountered")
    ratio = b / a
    return (x0 + ratio)[None, :] * np.exp(np.outer(t, a)) - ratio[None, :]


def _hermite_rule(n_nodes, weight_floor=1e-12):
    """Gauss–Hermite nodes/weights normalized for a standard-normal average.

    Nodes whose normalized weight falls below ``weight_floor`` are dropped;
    they contribute less than ``weight_floor`` relatively and dropping them
    keeps trajectory evaluations bounded.
    """
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    weights = weights / np.sqrt(np.pi)
    keep = weights >= weight_floor
    return nodes[keep], weights[keep]


def mixed_trajectories(x0, times, config):
    """Gaussian-smoothed trajectories over the initial condition.

    Each output column is the average of closed-form trajectories started
    at ``x0 + sqrt(2)*sigma*node`` under the Gauss–Hermite rule, i.e. the
    convolution of the trajectory surface with a Gaussian of standard
    deviation ``smoothing_sigma`` in the initial condition.
    """
    sigma = config.smoothing_sigma
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    nodes, weights = _hermite_rule(config.quad_nodes)
    offsets = np.sqrt(2.0) * sigma * nodes
    out = np.zeros((len(times), x0.size))
    for w, delta in zip(weights, offsets):
        out += w * closed_form_trajectories(x0 + delta, times, config)
    return out


def generate_nonlinear_ds(config):
    """Generate the didactic dataset (raw or smoothed, per the config)."""
    config.validate()
    lo, hi = config.x0_range
    if not lo < hi:
        raise ConfigError(f"x0_range must be a nondegenerate interval, got {config.x0_range}")
    # Uniformly spaced initial conditions; recorded in metadata because the
    # alternative (random draws) would change the benchmark.
    x0 = np.linspace(lo, hi, config.n_runs)
    times = np.linspace(0.0, config.t_end, config.n_times)
    meta = {
        "generator": "nonlinear_ds",
        "a0": config.a0,
        "a1": config.a1,
        "b0": config.b0,
        "smoothing_sigma": config.smoothing_sigma,
        "x0_spacing": "uniform",
        "t_end": config.t_end,
    }
    if config.smoothing_sigma > 0:
        outputs = mixed_trajectories(x0, times, config)
        nodes, weights = _hermite_rule(config.quad_nodes)
        meta["quadrature"] = {
            "rule": "gauss-hermite",
            "nodes_requested": config.quad_nodes,
            "nodes_used": int(len(nodes)),
            "weight_floor": 1e-12,
        }
    else:
        outputs = closed_form_trajectories(x0, times, config)
    return TimeSeriesDataset(
        times=times,
        outputs=outputs,
        params=x0.reshape(-1, 1),
        param_names=["x0"],
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# Block rain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RainEvent:
    """Rectangular rain event: intensity in mm/h, duration and start in minutes."""

    intensity: float
    duration: float
    start: float = 0.0

    def validate(self):
        check_positive(self.intensity, "intensity")
        check_positive(self.duration, "duration")
        check_nonnegative(self.start, "start")


def generate_block_rain(intensity, duration, times, start=0.0):
    """Sample a block rain event on a time grid (minutes).

    Returns
    -------
    values : ndarray, shape (len(times),)
        Intensity (mm/h) at each grid point: ``intensity`` on
        ``[start, start + duration)`` and 0 elsewhere.
    meta : dict
        ``{"subgrid_pulse": bool}`` — True when the duration is shorter
        than one grid step, in which case the pulse is widened to a
        single cell.
    """
    check_positive(intensity, "intensity")
    check_positive(duration, "duration")
    times = check_strictly_increasing(times, name="rain grid")
    values = np.zeros_like(times)
    inside = (times >= start) & (times < start + duration)
    step = float(np.min(np.diff(times)))
    meta = {"subgrid_pulse": bool(duration < step)}
    if not np.any(inside):
        # Sub-grid pulse that straddles no grid point: widen to one cell.
        if times[0] <= start <= times[-1]:
            cell = max(int(np.searchsorted(times, start, side="right") - 1), 0)
            values[cell] = intensity
        return values, meta
    values[inside] = intensity
    return values, meta


# ---------------------------------------------------------------------------
# Toy nonlinear-reservoir catchment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCatchmentConfig:
    """Nonlinear reservoir: dS/dt = area_scale*R(t) - k*S**m, outflow k*S**m.

    Storage S is in mm, time in minutes, rain input in mm/h (converted
    internally), outflow reported in mm/h.  ``storage_exponent`` m = 5/3
    gives Manning-like recession; ``discharge_coefficient`` k is in
    1/min at unit storage.
    """

    storage_exponent: float = 5.0 / 3.0
    discharge_coefficient: float = 0.01
    area_scale: float = 1.0
    initial_storage: float = 0.0
    dt: float = 0.5
    n_times: int = 2880
    substeps: int = 2
    # Optional saturating rating curve: when level_scale is set, the
    # observed output is the water level level_scale * tanh(q / discharge_ref)
    # instead of the discharge q itself.  Mimics a conduit whose level
    # saturates near capacity; the mass balance always uses the discharge.
    level_scale: float = None
    discharge_ref: float = None

    def validate(self):
        check_positive(self.storage_exponent, "storage_exponent")
        check_positive(self.discharge_coefficient, "discharge_coefficient")
        check_positive(self.area_scale, "area_scale")
        check_nonnegative(self.initial_storage, "initial_storage")
        check_positive(self.dt, "dt")
        if self.n_times < 2:
            raise ConfigError(f"n_times must be >= 2, got {self.n_times}")
        if self.substeps < 1:
            raise ConfigError(f"substeps must be >= 1, got {self.substeps}")
        if (self.level_scale is None) != (self.discharge_ref is None):
            raise ConfigError("level_scale and discharge_ref must be set together")
        if self.level_scale is not None:
            check_positive(self.level_scale, "level_scale")
            check_positive(self.discharge_ref, "discharge_ref")

    def time_grid(self):
        return np.arange(self.n_times) * self.dt

    def observe(self, discharge):
        """Map discharge (mm/h) to the observed output series."""
        if self.level_scale is None:
            return discharge
        return self.level_scale * np.tanh(discharge / self.discharge_ref)


def simulate_toy_catchment_batch(config, rain_values):
    """Integrate the reservoir for several runs at once.

    Parameters
    ----------
    config : ToyCatchmentConfig
    rain_values : ndarray, shape (n_times, n_runs)
        Rain intensity (mm/h) per grid point and run, treated as
        piecewise constant on each grid cell.

    Returns
    -------
    observed : ndarray, shape (n_times, n_runs)
        Discharge in mm/h, or the saturating water level when the config
        enables the rating curve.
    info : dict with "mass_balance_residual" (fraction of rain volume, per
        run, always computed on the discharge), "final_storage", and the
        raw "discharge" series.
    """
    config.validate()
    rain = np.atleast_2d(np.asarray(rain_values, dtype=float))
    if rain.ndim != 2 or rain.shape[0] != config.n_times:
        raise ConfigError(
            f"rain_values must have {config.n_times} rows, got shape {rain.shape}"
        )
    m = config.storage_exponent
    k = config.discharge_coefficient
    # Work in mm and minutes; rain arrives in mm/h.
    inflow = config.area_scale * rain / 60.0
    n_times, n_runs = rain.shape
    storage = np.full(n_runs, config.initial_storage, dtype=float)
    # Cumulative outflow integrated alongside the storage so the mass
    # balance closes to RK4 accuracy instead of trapezoid accuracy.
    cumulative = np.zeros(n_runs)
    outflow = np.empty((n_times, n_runs))
    outflow[0] = 60.0 * k * storage**m

    h = config.dt / config.substeps
    for i in range(n_times - 1):
        u = inflow[i]
        for _ in range(config.substeps):
            s1 = storage
            q1 = k * np.maximum(s1, 0.0) ** m
            s2 = storage + 0.5 * h * (u - q1)
            q2 = k * np.maximum(s2, 0.0) ** m
            s3 = storage + 0.5 * h * (u - q2)
            q3 = k * np.maximum(s3, 0.0) ** m
            s4 = storage + h * (u - q3)
            q4 = k * np.maximum(s4, 0.0) ** m
            storage = storage + (h / 6.0) * ((u - q1) + 2 * (u - q2) + 2 * (u - q3) + (u - q4))
            cumulative = cumulative + (h / 6.0) * (q1 + 2 * q2 + 2 * q3 + q4)
        if not np.all(np.isfinite(storage)):
            bad = int(np.flatnonzero(~np.isfinite(storage))[0])
            raise NumericalError(
                f"non-finite reservoir state at step {i + 1} (run {bad}); "
                f"reduce dt or check the rain input"
            )
        outflow[i + 1] = 60.0 * k * np.maximum(storage, 0.0) ** m

    rain_volume = inflow[:-1].sum(axis=0) * config.dt
    residual = rain_volume - cumulative - (storage - config.initial_storage)
    scale = np.where(rain_volume > 0, rain_volume, 1.0)
    info = {
        "mass_balance_residual": residual / scale,
        "final_storage": storage,
        "rain_volume": rain_volume,
        "outflow_volume": cumulative,
        "discharge": outflow,
    }
    return config.observe(outflow), info


def simulate_toy_catchment(config, rain):
    """Single-run convenience wrapper.

    ``rain`` may be a :class:`RainEvent` or a precomputed intensity series
    on the config's grid.
    """
    if isinstance(rain, RainEvent):
        rain.validate()
        values, _ = generate_block_rain(
            rain.intensity, rain.duration, config.time_grid(), start=rain.start
        )
    else:
        values = np.asarray(rain, dtype=float)
    observed, info = simulate_toy_catchment_batch(config, values.reshape(-1, 1))
    info = {
        key: (val[:, 0] if key == "discharge" else val[0]) for key, val in info.items()
    }
    return observed[:, 0], info


def nonlinear_ds_exact_map(config=None):
    """Exact simulator-to-proxy parameter map for the didactic system.

    The proxy ``ds/dt = psi1 s + psi2`` reproduces a trajectory exactly
    when psi1 and psi2 are the run's frozen decay rate and offset.
    """
    cfg = config or NonlinearDsConfig()
    if isinstance(cfg, dict):
        cfg = NonlinearDsConfig(**cfg)

    def mapping(theta_row):
        x0 = float(np.asarray(theta_row).reshape(-1)[0])
        return np.array(
            [trajectory_decay_rate(x0, cfg.a0, cfg.a1), trajectory_offset(x0, cfg.b0)]
        )

    return mapping


def toy_catchment_prior_map(config=None):
    """Ad-hoc prior map for the catchment proxy ``dh/dt = psi1 h + psi2 R``.

    Linearizes the reservoir at the steady storage of each event's
    intensity: psi1 is the local recession rate, and psi2 makes the
    proxy's steady output match the equilibrium under sustained rain
    (discharge equal to inflow, passed through the rating curve when one
    is configured).  This is the kind of best-guess mapping an expert
    would derive from the governing equation without fitting any data.
    """
    cfg = config or ToyCatchmentConfig()
    if isinstance(cfg, dict):
        cfg = ToyCatchmentConfig(**cfg)
    m = cfg.storage_exponent
    k = cfg.discharge_coefficient

    def mapping(theta_row):
        intensity = float(np.asarray(theta_row).reshape(-1)[0])
        steady_storage = (cfg.area_scale * intensity / 60.0 / k) ** (1.0 / m)
        recession = -m * k * steady_storage ** (m - 1.0)
        steady_output = float(cfg.observe(cfg.area_scale * intensity))
        return np.array([recession, -recession * steady_output / intensity])

    return mapping


def generate_toy_catchment_dataset(
    config=None,
    n_intensity=30,
    n_duration=30,
    intensity_range=(10.0, 100.0),
    duration_range=(10.0, 240.0),
    rain_start=0.0,
):
    """Full factorial block-rain sweep through intensity/duration space."""
    config = config or ToyCatchmentConfig()
    config.validate()
    intensities = np.linspace(*intensity_range, n_intensity)
    durations = np.linspace(*duration_range, n_duration)
    grid_i, grid_d = np.meshgrid(intensities, durations, indexing="ij")
    params = np.column_stack([grid_i.ravel(), grid_d.ravel()])
    times = config.time_grid()
    rain = np.zeros((config.n_times, len(params)))
    subgrid = 0
    for j, (intensity, duration) in enumerate(params):
        rain[:, j], meta = generate_block_rain(intensity, duration, times, start=rain_start)
        subgrid += bool(meta["subgrid_pulse"])
    outputs, info = simulate_toy_catchment_batch(config, rain)
    worst = float(np.max(np.abs(info["mass_balance_residual"])))
    if worst > 1e-3:
        raise NumericalError(f"mass balance violated: max residual {worst:.2e} of rain volume")
    meta = {
        "generator": "toy_catchment",
        "storage_exponent": config.storage_exponent,
        "discharge_coefficient": config.discharge_coefficient,
        "area_scale": config.area_scale,
        "level_scale": config.level_scale,
        "discharge_ref": config.discharge_ref,
        "dt_min": config.dt,
        "rain_start_min": rain_start,
        "intensity_range_mm_h": list(intensity_range),
        "duration_range_min": list(duration_range),
        "subgrid_pulses": subgrid,
        "max_mass_balance_residual": worst,
    }
    return TimeSeriesDataset(
        times=times,
        outputs=outputs,
        params=params,
        param_names=["intensity_mm_h", "duration_min"],
        metadata=meta,
    )
