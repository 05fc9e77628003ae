"""Fast surrogate emulators of dynamical-system simulators.

Two emulator families share a common dataset, metric, and CLI harness:

* :class:`DataDrivenEmulator` — matrix factorization (SVD or NMF) of the
  training outputs plus GP interpolation of the coefficients over the
  simulator parameters.
* :class:`MechanisticEmulator` — a GP whose prior is the law of stacked
  linear stochastic ODE proxies, with exact or fitted parameter maps and
  an optional tanh output warp.
"""

from .dataset import (
    TimeSeriesDataset,
    even_subsample_indices,
    read_dataset,
    split_dataset,
    subsample_times,
    write_dataset,
)
from .datadriven import DataDrivenEmulator, load_data_driven, save_data_driven
from .evaluation import EmulatorReport, compare, evaluate, mae, rmse
from .exceptions import (
    ConfigError,
    DomainError,
    EmulationError,
    FactorizationFailure,
    NumericalError,
    TimeExtrapolationError,
)
from .factorization import (
    NmfFactorizer,
    SvdFactorizer,
    load_factor_model,
    project_onto_basis,
    save_factor_model,
)
from .generators import (
    NonlinearDsConfig,
    RainEvent,
    ToyCatchmentConfig,
    closed_form_trajectories,
    generate_block_rain,
    generate_nonlinear_ds,
    generate_toy_catchment_dataset,
    mixed_trajectories,
    nonlinear_ds_exact_map,
    simulate_toy_catchment,
    toy_catchment_prior_map,
    trajectory_decay_rate,
    trajectory_offset,
)
from .gp import GaussianProcess, log_marginal_likelihood, optimize_hyperparams
from .kernels import Matern, Scaled, SquaredExponential
from .lti import (
    LtiProxy,
    PiecewiseConstantSignal,
    SdeKernel,
    mean_function,
    sde_covariance,
)
from .mem import (
    MechanisticEmulator,
    ParameterMap,
    build_param_map,
    build_proxy,
    fit_proxy,
    load_mem,
    register_exact_map,
    save_mem,
)
from .warp import WarpSpec, fit_warped_proxy, warp_apply, warp_fit, warp_invert

__version__ = "0.1.0"

# Named exact maps usable in persisted emulator bundles.
register_exact_map("nonlinear_ds", nonlinear_ds_exact_map)
register_exact_map("toy_catchment_prior", toy_catchment_prior_map)

__all__ = [
    "TimeSeriesDataset",
    "read_dataset",
    "write_dataset",
    "split_dataset",
    "subsample_times",
    "even_subsample_indices",
    "NonlinearDsConfig",
    "RainEvent",
    "ToyCatchmentConfig",
    "generate_nonlinear_ds",
    "generate_block_rain",
    "generate_toy_catchment_dataset",
    "simulate_toy_catchment",
    "closed_form_trajectories",
    "mixed_trajectories",
    "trajectory_decay_rate",
    "trajectory_offset",
    "nonlinear_ds_exact_map",
    "toy_catchment_prior_map",
    "SvdFactorizer",
    "NmfFactorizer",
    "project_onto_basis",
    "save_factor_model",
    "load_factor_model",
    "SquaredExponential",
    "Matern",
    "Scaled",
    "GaussianProcess",
    "log_marginal_likelihood",
    "optimize_hyperparams",
    "LtiProxy",
    "PiecewiseConstantSignal",
    "SdeKernel",
    "mean_function",
    "sde_covariance",
    "MechanisticEmulator",
    "ParameterMap",
    "build_param_map",
    "build_proxy",
    "fit_proxy",
    "register_exact_map",
    "save_mem",
    "load_mem",
    "WarpSpec",
    "warp_apply",
    "warp_invert",
    "warp_fit",
    "fit_warped_proxy",
    "DataDrivenEmulator",
    "save_data_driven",
    "load_data_driven",
    "EmulatorReport",
    "evaluate",
    "compare",
    "mae",
    "rmse",
    "EmulationError",
    "ConfigError",
    "DomainError",
    "TimeExtrapolationError",
    "NumericalError",
    "FactorizationFailure",
]
