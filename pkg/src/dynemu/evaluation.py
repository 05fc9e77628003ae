"""Emulation error metrics, per-run reports, and emulator comparison.

Per test run the maximum absolute error captures how well peaks are
reproduced and the root-mean-square error the overall fit; per run the
maximum always dominates the quadratic mean, which is asserted on every
evaluation.  Percentage metrics are normalized by the global range
(max - min) of the simulated test signals, so they are invariant under
permutation of the test set.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import atomic_write, write_csv_matrix
from .exceptions import ConfigError, EmulationError
from .validation import as_float_array, check_consistent_length


def mae(emulated, simulated):
    """Maximum absolute pointwise error between two series."""
    emulated = as_float_array(emulated, name="emulated", ndim=1)
    simulated = as_float_array(simulated, name="simulated", ndim=1)
    check_consistent_length(emulated, simulated, "emulated", "simulated")
    return float(np.max(np.abs(emulated - simulated)))


def rmse(emulated, simulated):
    """Root-mean-square pointwise error between two series."""
    emulated = as_float_array(emulated, name="emulated", ndim=1)
    simulated = as_float_array(simulated, name="simulated", ndim=1)
    check_consistent_length(emulated, simulated, "emulated", "simulated")
    return float(np.sqrt(np.mean((emulated - simulated) ** 2)))


def _summary(values):
    values = np.asarray(values, dtype=float)
    return {
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "q25": float(np.percentile(values, 25)),
        "q75": float(np.percentile(values, 75)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def _log10_summary(values):
    with np.errstate(divide="ignore"):
        logs = np.log10(np.asarray(values, dtype=float))
    summary = _summary(logs)
    # Zero errors give -inf; serialize them as the "exact" sentinel.
    return {k: (v if np.isfinite(v) else "exact") for k, v in summary.items()}


@dataclass
class EmulatorReport:
    """Per-run test errors plus distribution summaries and timings."""

    name: str
    per_run_mae: np.ndarray
    per_run_rmse: np.ndarray
    normalizer: float
    timing: dict = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_run_mae = np.asarray(self.per_run_mae, dtype=float)
        self.per_run_rmse = np.asarray(self.per_run_rmse, dtype=float)
        if np.any(self.per_run_mae + 1e-15 < self.per_run_rmse):
            raise ConfigError(
                "per-run maximum error fell below the RMS error; "
                "metric computation is inconsistent"
            )

    @property
    def per_run_mae_pct(self):
        return 100.0 * self.per_run_mae / self.normalizer

    @property
    def per_run_rmse_pct(self):
        return 100.0 * self.per_run_rmse / self.normalizer

    def summaries(self):
        return {
            "mae": _summary(self.per_run_mae),
            "rmse": _summary(self.per_run_rmse),
            "mae_pct": _summary(self.per_run_mae_pct),
            "rmse_pct": _summary(self.per_run_rmse_pct),
            "log10_mae": _log10_summary(self.per_run_mae),
            "log10_rmse": _log10_summary(self.per_run_rmse),
        }

    def to_dict(self, include_timing=True):
        payload = {
            "name": self.name,
            "normalizer": self.normalizer,
            "n_test_runs": int(self.per_run_mae.size),
            "summaries": self.summaries(),
            "per_run": {
                "mae": self.per_run_mae.tolist(),
                "rmse": self.per_run_rmse.tolist(),
            },
            "flags": {k: int(v) for k, v in self.flags.items()},
        }
        if include_timing and self.timing is not None:
            payload["timing"] = self.timing
        return payload

    @classmethod
    def from_dict(cls, payload, timing=None):
        return cls(
            name=payload["name"],
            per_run_mae=np.asarray(payload["per_run"]["mae"], dtype=float),
            per_run_rmse=np.asarray(payload["per_run"]["rmse"], dtype=float),
            normalizer=float(payload["normalizer"]),
            timing=timing if timing is not None else payload.get("timing"),
            flags=dict(payload.get("flags", {})),
        )

    @classmethod
    def read(cls, directory):
        with open(os.path.join(directory, "report.json")) as fh:
            payload = json.load(fh)
        timing = None
        timing_path = os.path.join(directory, "timing.json")
        if os.path.exists(timing_path):
            with open(timing_path) as fh:
                timing = json.load(fh)
        return cls.from_dict(payload, timing=timing)

    def write(self, directory, include_timing_file=True, histograms=False):
        """Write report.json / report.csv (+ timing.json separately).

        Timings vary run to run, so they live in their own file and the
        deterministic artifacts stay byte-stable under fixed seeds.  With
        ``histograms=True`` also emits per-metric histogram CSVs for
        external plotting.
        """
        os.makedirs(directory, exist_ok=True)
        atomic_write(
            os.path.join(directory, "report.json"),
            lambda fh: json.dump(self.to_dict(include_timing=False), fh, indent=1),
        )
        table = np.column_stack(
            [
                np.arange(self.per_run_mae.size, dtype=float),
                self.per_run_mae,
                self.per_run_rmse,
                self.per_run_mae_pct,
                self.per_run_rmse_pct,
            ]
        )
        write_csv_matrix(
            os.path.join(directory, "report.csv"),
            table,
            ["run", "mae", "rmse", "mae_pct", "rmse_pct"],
        )
        if include_timing_file and self.timing is not None:
            atomic_write(
                os.path.join(directory, "timing.json"),
                lambda fh: json.dump(self.timing, fh, indent=1),
            )
        if histograms:
            for metric, values in (("mae", self.per_run_mae), ("rmse", self.per_run_rmse)):
                counts, edges = np.histogram(values, bins=min(30, max(5, values.size // 5)))
                hist = np.column_stack([edges[:-1], edges[1:], counts.astype(float)])
                write_csv_matrix(
                    os.path.join(directory, f"hist_{metric}.csv"),
                    hist,
                    ["bin_left", "bin_right", "count"],
                )


def _locate_failing_run(emulator, theta, times, idx, original):
    """Re-run queries one by one to attach a run index to a batch failure."""
    for row, run in zip(theta, idx):
        try:
            emulator.predict(row[None, :], times=times)
        except EmulationError:
            return type(original)(f"prediction failed for test run {int(run)}: {original}")
    return type(original)(f"prediction failed on the test batch: {original}")


def _median_seconds(fn, reps):
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def evaluate(
    emulator,
    ds,
    test_indices=None,
    name=None,
    simulator=None,
    timing_reps=5,
    measure_timing=True,
):
    """Evaluate an emulator on the test split of a dataset.

    Parameters
    ----------
    emulator : fitted estimator with ``predict(theta, times=...)``.
    ds : TimeSeriesDataset
    test_indices : optional override of ``ds.test_idx``.
    simulator : callable, optional
        ``simulator(theta_row) -> series`` used only for timing; its
        single-run cost is the median of ``timing_reps`` repetitions.
    """
    idx = ds.test_idx if test_indices is None else np.asarray(test_indices, dtype=int)
    if idx.size == 0:
        raise ConfigError("the test set is empty")
    theta = ds.params[idx]
    truth = ds.outputs[:, idx].T  # (n_test, n_times)

    t_start = time.perf_counter()
    try:
        try:
            predictions, info = emulator.predict(theta, times=ds.times, return_info=True)
        except TypeError:
            predictions = emulator.predict(theta, times=ds.times)
            info = {}
    except EmulationError as exc:
        raise _locate_failing_run(emulator, theta, ds.times, idx, exc) from exc
    batch_seconds = time.perf_counter() - t_start
    if predictions.shape != truth.shape:
        raise ConfigError(
            f"emulator returned shape {predictions.shape}, expected {truth.shape}"
        )
    if not np.all(np.isfinite(predictions)):
        bad = int(idx[np.flatnonzero(~np.all(np.isfinite(predictions), axis=1))[0]])
        raise ConfigError(f"emulator produced non-finite predictions (run {bad})")

    per_run_mae = np.max(np.abs(predictions - truth), axis=1)
    per_run_rmse = np.sqrt(np.mean((predictions - truth) ** 2, axis=1))
    # max >= quadratic mean, always; a violation means a metric bug.
    assert np.all(per_run_mae + 1e-15 >= per_run_rmse)

    normalizer = float(truth.max() - truth.min())
    if normalizer <= 0:
        normalizer = max(abs(float(truth.max())), 1e-300)

    timing = None
    if measure_timing:
        timing = {
            "emulator_batch_seconds": batch_seconds,
            "emulator_seconds_per_run": batch_seconds / idx.size,
            "emulator_seconds_single_run": _median_seconds(
                lambda: emulator.predict(theta[:1], times=ds.times), timing_reps
            ),
        }
        if simulator is not None:
            timing["simulator_seconds_per_run"] = _median_seconds(
                lambda: simulator(theta[0]), timing_reps
            )
            timing["speedup_factor"] = (
                timing["simulator_seconds_per_run"]
                / max(timing["emulator_seconds_single_run"], 1e-12)
            )

    flags = {}
    for key, values in info.items():
        flags[key] = int(np.sum(values))
    return EmulatorReport(
        name=name or type(emulator).__name__,
        per_run_mae=per_run_mae,
        per_run_rmse=per_run_rmse,
        normalizer=normalizer,
        timing=timing,
        flags=flags,
    )


def compare(reports):
    """Side-by-side comparison of evaluation reports.

    Returns a dict with one row per report (sorted by mean RMSE, then
    name, so the ordering is stable under permutation of the inputs) and
    a Markdown rendering.
    """
    if not reports:
        raise ConfigError("no reports to compare")
    rows = []
    for report in reports:
        timing = report.timing or {}
        rows.append(
            {
                "name": report.name,
                "mean_mae": float(np.mean(report.per_run_mae)),
                "mean_mae_pct": float(np.mean(report.per_run_mae_pct)),
                "mean_rmse": float(np.mean(report.per_run_rmse)),
                "mean_rmse_pct": float(np.mean(report.per_run_rmse_pct)),
                "speedup_factor": timing.get("speedup_factor"),
            }
        )
    rows.sort(key=lambda row: (row["mean_rmse"], row["name"]))
    header = "| Emulator | MAE (abs, %) | RMSE (abs, %) | Speed-up |"
    ruler = "|---|---|---|---|"
    lines = [header, ruler]
    for row in rows:
        speedup = (
            f"{row['speedup_factor']:.3g}x" if row["speedup_factor"] else "-"
        )
        lines.append(
            f"| {row['name']} | {row['mean_mae']:.4g}, {row['mean_mae_pct']:.2f}% "
            f"| {row['mean_rmse']:.4g}, {row['mean_rmse_pct']:.2f}% | {speedup} |"
        )
    return {"rows": rows, "markdown": "\n".join(lines) + "\n"}


def write_comparison(comparison, directory):
    os.makedirs(directory, exist_ok=True)
    atomic_write(
        os.path.join(directory, "compare.md"), lambda fh: fh.write(comparison["markdown"])
    )
    atomic_write(
        os.path.join(directory, "compare.json"),
        lambda fh: json.dump(comparison["rows"], fh, indent=1),
    )
