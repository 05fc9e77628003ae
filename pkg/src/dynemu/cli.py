"""Command-line harness: dataset generation, training, prediction, evaluation.

One declarative YAML config drives a whole experiment; ``--set key=value``
overrides nested entries (dotted paths, list indices allowed).  The
``repro`` subcommand runs the bundled benchmark scenarios end to end and
prints one pass/fail line per acceptance check.

Exit codes: 0 success, 1 failed reproduction check, 2 configuration or
input error, 3 domain error (e.g. querying outside the training grid),
4 numerical failure.  ``EMU_LOG`` selects the log level.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .dataset import (
    atomic_write,
    even_subsample_indices,
    read_csv_matrix,
    read_dataset,
    split_dataset,
    subsample_times,
    write_csv_matrix,
    write_dataset,
)
from .datadriven import DataDrivenEmulator, load_data_driven, save_data_driven
from .evaluation import EmulatorReport, compare, evaluate, write_comparison
from .exceptions import ConfigError, DomainError, EmulationError, NumericalError
from .generators import (
    NonlinearDsConfig,
    ToyCatchmentConfig,
    generate_block_rain,
    generate_nonlinear_ds,
    generate_toy_catchment_dataset,
    simulate_toy_catchment,
)
from .kernels import Matern, SquaredExponential
from .mem import MechanisticEmulator, load_mem, save_mem

log = logging.getLogger("dynemu")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        config = yaml.safe_load(fh)
    if not isinstance(config, dict):
        raise ConfigError("config must be a mapping")
    return config


def apply_overrides(config, overrides):
    """Apply ``--set a.b.0.c=value`` style overrides in place."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return config


def _dataset_from_config(config, seed_override=None):
    spec = config.get("dataset")
    if not spec:
        raise ConfigError("config is missing the 'dataset' section")
    seed = seed_override if seed_override is not None else spec.get("seed", 0)
    if "path" in spec:
        ds = read_dataset(spec["path"])
    else:
        generator = spec.get("generator")
        params = dict(spec.get("params", {}))
        if generator == "nonlinear_ds":
            ds = generate_nonlinear_ds(NonlinearDsConfig(**params))
        elif generator == "toy_catchment":
            grid = dict(spec.get("grid", {}))
            ds = generate_toy_catchment_dataset(ToyCatchmentConfig(**params), **grid)
        else:
            raise ConfigError(f"unknown dataset generator {generator!r}")
        ds.metadata["seed"] = int(seed)
        ds.metadata["code_version"] = __version__
    keep = spec.get("subsample")
    if keep:
        ds = subsample_times(ds, even_subsample_indices(ds.n_times, int(keep)))
    n_train = spec.get("n_train")
    if n_train:
        ds = split_dataset(ds, int(n_train), seed=int(seed))
    return ds


def _coupling_from_spec(spec):
    if spec in (None, "none"):
        return None, False
    if not isinstance(spec, dict):
        raise ConfigError(f"cannot interpret coupling spec {spec!r}")
    family = spec.get("kernel", "matern")
    lengthscales = spec.get("lengthscale", 1.0)
    variance = spec.get("variance", 1.0)
    if family == "matern":
        kernel = Matern(spec.get("order", 1.5), variance, lengthscales)
    elif family == "squared_exponential":
        kernel = SquaredExponential(variance, lengthscales)
    else:
        raise ConfigError(f"unknown coupling kernel {family!r}")
    return kernel, bool(spec.get("optimize", False))


def _emulator_from_spec(spec, seed_override=None):
    kind = spec.get("type")
    seed = seed_override if seed_override is not None else spec.get("seed", 0)
    if kind == "data_driven":
        return DataDrivenEmulator(
            method=spec.get("method", "svd"),
            n_components=int(spec.get("n_components", 6)),
            penalty_basis=float(spec.get("penalty_basis", 0.0)),
            penalty_coeffs=float(spec.get("penalty_coeffs", 0.0)),
            clip_negative=bool(spec.get("clip_negative", False)),
            gp_restarts=int(spec.get("gp_restarts", 8)),
            seed=int(seed),
        )
    if kind == "mechanistic":
        coupling, optimize_coupling = _coupling_from_spec(spec.get("coupling"))
        exact_map = spec.get("exact_map")
        if isinstance(exact_map, str):
            exact_map = {"name": exact_map, "config": spec.get("exact_map_config", {})}
        return MechanisticEmulator(
            proxy_input=spec.get("proxy_input", "constant"),
            initial_state=spec.get("initial_state", "zero"),
            mapping=spec.get("mapping", "fit"),
            exact_map=exact_map,
            coupling=coupling,
            optimize_coupling=optimize_coupling,
            warp=spec.get("warp"),
            seed=int(seed),
        )
    raise ConfigError(f"unknown emulator type {kind!r}")


def _emulator_specs(config):
    specs = config.get("emulators")
    if not specs:
        raise ConfigError("config needs at least one emulator spec")
    for spec in specs:
        if "name" not in spec:
            raise ConfigError("every emulator spec needs a 'name'")
    names = [spec["name"] for spec in specs]
    if len(set(names)) != len(names):
        raise ConfigError("emulator names must be unique")
    return specs


def _simulator_for_timing(ds):
    """Single-run reference simulator for speed-up measurements."""
    meta = ds.metadata or {}
    generator = meta.get("generator")
    if generator == "toy_catchment":
        config = ToyCatchmentConfig(
            storage_exponent=meta["storage_exponent"],
            discharge_coefficient=meta["discharge_coefficient"],
            area_scale=meta["area_scale"],
            level_scale=meta.get("level_scale"),
            discharge_ref=meta.get("discharge_ref"),
            dt=meta["dt_min"],
            n_times=int(meta.get("subsampled_from", ds.n_times)),
        )
        start = meta.get("rain_start_min", 0.0)

        def run(theta_row):
            rain, _ = generate_block_rain(
                theta_row[0], theta_row[1], config.time_grid(), start=start
            )
            return simulate_toy_catchment(config, rain)[0]

        return run
    if generator == "nonlinear_ds":
        from .generators import closed_form_trajectories

        cfg = NonlinearDsConfig(
            a0=meta.get("a0", 12.616), a1=meta.get("a1", 5.0), b0=meta.get("b0", 2.0)
        )

        def run(theta_row):
            return closed_form_trajectories([theta_row[0]], ds.times, cfg)[:, 0]

        return run
    return None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    config = apply_overrides(load_config(args.config), args.set)
    out = args.out or config.get("output_dir", "out")
    ds = _dataset_from_config(config, seed_override=args.seed)
    path = os.path.join(out, "dataset")
    write_dataset(ds, path)
    log.info("wrote dataset with %d runs x %d times to %s", ds.n_runs, ds.n_times, path)
    print(f"dataset: {path} ({ds.n_runs} runs x {ds.n_times} times)")
    return 0


def _load_bundle(path):
    if os.path.exists(os.path.join(path, "emulator_meta.json")):
        return load_data_driven(path)
    if os.path.exists(os.path.join(path, "mem_meta.json")):
        return load_mem(path)
    raise ConfigError(f"no emulator bundle found in {path}")


def _save_bundle(emulator, path):
    if isinstance(emulator, DataDrivenEmulator):
        save_data_driven(emulator, path)
    else:
        save_mem(emulator, path)


def _training_log(emulator):
    entry = {}
    if isinstance(emulator, DataDrivenEmulator):
        entry["training_error"] = emulator.training_error_
        entry["kernels"] = [
            {"variance": gp.kernel_.variance, "lengthscales": gp.kernel_.lengthscales.tolist(),
             "lml": gp.lml_}
            for gp in emulator.coeff_gps_
        ]
        factor = emulator.factor_
        if hasattr(factor, "n_iter_"):
            entry["nmf_iterations"] = factor.n_iter_
            entry["nmf_objective"] = factor.objective_
    else:
        entry["proxy_residuals"] = emulator.proxy_residuals_.tolist()
        entry["nugget"] = emulator.nugget_
        if emulator.coupling_ is not None:
            from .kernels import kernel_to_dict

            entry["coupling"] = kernel_to_dict(emulator.coupling_)
            if hasattr(emulator, "coupling_lml_"):
                entry["coupling_lml"] = emulator.coupling_lml_
    return entry


def _train_all(config, out, seed_override=None):
    ds = _dataset_from_config(config, seed_override=seed_override)
    if ds.train_idx.size == 0:
        raise ConfigError("dataset has no training split; set dataset.n_train")
    theta, Y, times = ds.train_arrays()
    emulators = {}
    for spec in _emulator_specs(config):
        name = spec["name"]
        log.info("training emulator %s", name)
        emulator = _emulator_from_spec(spec, seed_override=seed_override)
        start = time.perf_counter()
        emulator.fit(theta, Y, times=times)
        elapsed = time.perf_counter() - start
        bundle = os.path.join(out, "emulators", name)
        _save_bundle(emulator, bundle)
        log_entry = _training_log(emulator)
        atomic_write(
            os.path.join(bundle, "training_log.json"),
            lambda fh, entry=log_entry: json.dump(entry, fh, indent=1),
        )
        with open(os.path.join(bundle, "training_time.json"), "w") as fh:
            json.dump({"seconds": elapsed}, fh)
        emulators[name] = emulator
        print(f"trained: {name} ({elapsed:.2f}s) -> {bundle}")
    return ds, emulators


def cmd_train(args):
    config = apply_overrides(load_config(args.config), args.set)
    out = args.out or config.get("output_dir", "out")
    _train_all(config, out, seed_override=args.seed)
    return 0


def cmd_predict(args):
    emulator = _load_bundle(args.bundle)
    if args.theta is not None:
        theta = np.array([[float(v) for v in args.theta.split(",")]])
    elif args.theta_file:
        _, theta = read_csv_matrix(args.theta_file, "theta file")
    else:
        raise ConfigError("predict needs --theta or --theta-file")
    times = None
    if args.times_file:
        _, times_col = read_csv_matrix(args.times_file, "times file")
        times = times_col[:, 0]
    # One query at a time: a batch file must produce exactly the
    # concatenation of single-query predictions (BLAS reductions are not
    # bit-stable across batch shapes).
    predictions = np.vstack(
        [emulator.predict(theta[i : i + 1], times=times) for i in range(len(theta))]
    )
    out = args.out or "predictions.csv"
    header = [f"pred_{i + 1:04d}" for i in range(predictions.shape[0])]
    write_csv_matrix(out, predictions.T, header)
    print(f"predictions: {out} ({predictions.shape[0]} series x {predictions.shape[1]} times)")
    return 0


def _evaluate_all(config, out, seed_override=None, measure_timing=True, histograms=False):
    ds, emulators = _train_all(config, out, seed_override=seed_override)
    simulator = _simulator_for_timing(ds) if measure_timing else None
    reports = []
    for name, emulator in emulators.items():
        report = evaluate(
            emulator, ds, name=name, simulator=simulator, measure_timing=measure_timing
        )
        report.write(os.path.join(out, "reports", name), histograms=histograms)
        reports.append(report)
        summaries = report.summaries()
        print(
            f"evaluated: {name}  mean RMSE {summaries['rmse']['mean']:.4g} "
            f"({summaries['rmse_pct']['mean']:.2f}%)"
        )
    return ds, reports


def cmd_evaluate(args):
    config = apply_overrides(load_config(args.config), args.set)
    out = args.out or config.get("output_dir", "out")
    _evaluate_all(config, out, seed_override=args.seed, histograms=args.plot)
    return 0


def cmd_compare(args):
    config = apply_overrides(load_config(args.config), args.set)
    out = args.out or config.get("output_dir", "out")
    reports_dir = os.path.join(out, "reports")
    reports = []
    if os.path.isdir(reports_dir):
        for name in sorted(os.listdir(reports_dir)):
            report_path = os.path.join(reports_dir, name)
            if os.path.exists(os.path.join(report_path, "report.json")):
                reports.append(EmulatorReport.read(report_path))
    if not reports:
        _, reports = _evaluate_all(config, out, seed_override=args.seed)
    comparison = compare(reports)
    write_comparison(comparison, out)
    print(comparison["markdown"])
    return 0


# ---------------------------------------------------------------------------
# Reproduction scenarios
# ---------------------------------------------------------------------------

def _check(name, condition, detail):
    status = "PASS" if condition else "FAIL"
    print(f"[{status}] {name}: {detail}")
    return bool(condition)


def _repro_ds1(out, seed):
    ds_full = generate_nonlinear_ds(NonlinearDsConfig())
    ds_full = split_dataset(ds_full, 10, seed=seed)
    ds_sparse = subsample_times(ds_full, even_subsample_indices(ds_full.n_times, 6))
    write_dataset(ds_sparse, os.path.join(out, "dataset"))
    theta, Y, times = ds_sparse.train_arrays()

    mem = MechanisticEmulator(
        proxy_input="constant", initial_state="first_param",
        mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
        coupling=None, seed=seed,
    ).fit(theta, Y, times=times)
    svd = DataDrivenEmulator(method="svd", n_components=6, seed=seed).fit(
        theta, Y, times=times
    )

    theta_test = ds_full.params[ds_full.test_idx]
    truth = ds_full.outputs[:, ds_full.test_idx].T
    mem_pred = mem.predict(theta_test, times=ds_full.times)
    max_err = float(np.max(np.abs(mem_pred - truth)))
    mem_report = evaluate(mem, ds_full, name="mechanistic-exact", measure_timing=False)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        svd_report = evaluate(svd, ds_full, name="svd-q6", measure_timing=False)
    for report in (mem_report, svd_report):
        report.write(os.path.join(out, "reports", report.name))
    write_comparison(compare([mem_report, svd_report]), out)

    mem_rmse = float(np.mean(mem_report.per_run_rmse))
    svd_rmse = float(np.mean(svd_report.per_run_rmse))
    ok = _check("mechanistic emulator is exact on the didactic dataset",
                max_err < 1e-6, f"max abs error {max_err:.3e} < 1e-6")
    ok &= _check("basis emulator fails at unseen times (ratio >= 100)",
                 svd_rmse >= 100.0 * mem_rmse,
                 f"svd mean RMSE {svd_rmse:.3e} vs mechanistic {mem_rmse:.3e}")
    return ok


def _repro_ds2(out, seed):
    ds_full = generate_nonlinear_ds(NonlinearDsConfig(smoothing_sigma=0.5))
    ds_full = split_dataset(ds_full, 10, seed=seed)
    ds_sparse = subsample_times(ds_full, even_subsample_indices(ds_full.n_times, 6))
    write_dataset(ds_sparse, os.path.join(out, "dataset"))
    theta, Y, times = ds_sparse.train_arrays()

    common = dict(proxy_input="constant", initial_state="first_param", seed=seed)
    exact = MechanisticEmulator(
        mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
        coupling=Matern(1.5, 1.0, 1.0), optimize_coupling=True, **common,
    ).fit(theta, Y, times=times)
    fitted = MechanisticEmulator(
        mapping="fit", coupling=Matern(1.5, 1.0, 1.0), optimize_coupling=True, **common,
    ).fit(theta, Y, times=times)

    exact_report = evaluate(exact, ds_full, name="mechanistic-exact-map", measure_timing=False)
    fitted_report = evaluate(fitted, ds_full, name="mechanistic-fitted", measure_timing=False)
    for report in (exact_report, fitted_report):
        report.write(os.path.join(out, "reports", report.name))
    write_comparison(compare([exact_report, fitted_report]), out)

    rmse_exact = float(np.mean(exact_report.per_run_rmse))
    rmse_fit = float(np.mean(fitted_report.per_run_rmse))
    ratio = rmse_exact / max(rmse_fit, 1e-300)
    return _check("fitted proxies reduce the epistemic bias",
                  rmse_fit <= rmse_exact + 1e-12,
                  f"fitted {rmse_fit:.4e} <= exact-map {rmse_exact:.4e} "
                  f"(improvement x{ratio:.1f})")


CATCHMENT_BENCH = dict(level_scale=2.0, discharge_ref=10.0)


def _repro_catchment(out, seed, with_warped=False):
    config = ToyCatchmentConfig(**CATCHMENT_BENCH)
    ds = generate_toy_catchment_dataset(config)
    ds = subsample_times(ds, even_subsample_indices(ds.n_times, 52))
    ds = split_dataset(ds, 200, seed=seed)
    write_dataset(ds, os.path.join(out, "dataset"))
    theta, Y, times = ds.train_arrays()

    specs = {
        "nmf-q7": DataDrivenEmulator(method="nmf", n_components=7, seed=seed),
        "svd-q6": DataDrivenEmulator(method="svd", n_components=6, seed=seed),
        "mem-fit": MechanisticEmulator(
            proxy_input={"kind": "block_rain"}, initial_state="zero",
            mapping="fit", coupling=None, seed=seed,
        ),
        "mem-prior": MechanisticEmulator(
            proxy_input={"kind": "block_rain"}, initial_state="zero",
            mapping="exact",
            exact_map={"name": "toy_catchment_prior", "config": CATCHMENT_BENCH},
            coupling=None, seed=seed,
        ),
    }
    if with_warped:
        specs["mem-warped"] = MechanisticEmulator(
            proxy_input={"kind": "block_rain"}, initial_state="zero",
            mapping="fit", warp="tanh", coupling=None, seed=seed,
        )

    simulator = _simulator_for_timing(ds)
    reports = {}
    for name, emulator in specs.items():
        start = time.perf_counter()
        emulator.fit(theta, Y, times=times)
        log.info("fitted %s in %.1fs", name, time.perf_counter() - start)
        reports[name] = evaluate(emulator, ds, name=name, simulator=simulator)
        reports[name].write(os.path.join(out, "reports", name))
    write_comparison(compare(list(reports.values())), out)

    def mean_rmse(name):
        return float(np.mean(reports[name].per_run_rmse))

    nmf_pct = float(np.mean(reports["nmf-q7"].per_run_rmse_pct))
    ok = _check("factorization emulator under 10% of signal range",
                nmf_pct < 10.0, f"nmf mean RMSE {nmf_pct:.2f}% < 10%")
    ok &= _check("data-driven emulator beats the linear-proxy mechanistic one",
                 mean_rmse("nmf-q7") <= mean_rmse("mem-fit"),
                 f"nmf {mean_rmse('nmf-q7'):.4g} <= mem-fit {mean_rmse('mem-fit'):.4g}")
    ok &= _check("fitted proxies beat the prior-guess mapping",
                 mean_rmse("mem-fit") <= mean_rmse("mem-prior"),
                 f"mem-fit {mean_rmse('mem-fit'):.4g} <= mem-prior {mean_rmse('mem-prior'):.4g}")
    timing = reports["nmf-q7"].timing
    speedup = timing.get("speedup_factor", 0.0)
    ok &= _check("emulator at least 100x faster than the simulator",
                 speedup >= 100.0, f"speed-up x{speedup:.0f}")
    return ok


def cmd_repro(args):
    out = args.out or f"repro-{args.experiment}"
    seed = args.seed if args.seed is not None else {"ds1": 42, "ds2": 42, "catchment": 7}[
        args.experiment
    ]
    os.makedirs(out, exist_ok=True)
    if args.experiment == "ds1":
        ok = _repro_ds1(out, seed)
    elif args.experiment == "ds2":
        ok = _repro_ds2(out, seed)
    else:
        ok = _repro_catchment(out, seed, with_warped=args.with_warped)
    print("reproduction:", "all checks passed" if ok else "CHECKS FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynemu",
        description="Surrogate emulators of dynamical-system simulators",
    )
    parser.add_argument("--version", action="version", version=f"dynemu {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML experiment config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config entry (dotted path)")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="limit BLAS/OpenMP thread pools")

    p = sub.add_parser("generate", help="generate a dataset from the config")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train every emulator in the config")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict series from a trained bundle")
    p.add_argument("--bundle", required=True, help="trained emulator directory")
    p.add_argument("--theta", help="comma-separated parameter vector")
    p.add_argument("--theta-file", help="CSV of parameter rows")
    p.add_argument("--times-file", help="CSV with a time column")
    add_common(p, needs_config=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="train and evaluate on the test split")
    p.add_argument("--plot", action="store_true",
                   help="emit per-metric histogram CSVs for external plotting")
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="render the emulator comparison table")
    add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("repro", help="run a bundled benchmark scenario")
    p.add_argument("experiment", choices=["ds1", "ds2", "catchment"])
    p.add_argument("--with-warped", action="store_true",
                   help="also train the warped mechanistic emulator (catchment)")
    add_common(p, needs_config=False)
    p.set_defaults(func=cmd_repro)
    return parser


def _setup_logging():
    level = os.environ.get("EMU_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _limit_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(n))
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(int(n))


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(getattr(args, "threads", None))
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except EmulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
