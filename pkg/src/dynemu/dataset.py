"""Time-series dataset container, train/test splitting, and disk format.

A dataset bundles the common time grid, one output column per simulation
run, the per-run parameter vectors, and a train/test partition of the
runs.  On disk a dataset is a directory with ``times.csv``,
``outputs.csv``, ``params.csv``, ``split.json`` and an optional
``meta.json`` carrying provenance (generator, seed, quadrature settings,
warnings).  All floats are serialized with 17 significant digits so a
write/read round trip is bit-exact.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .validation import as_float_array, check_strictly_increasing

FLOAT_FMT = "%.17g"


@dataclass
class TimeSeriesDataset:
    """Simulation outputs on a fixed time grid with a train/test split.

    Attributes
    ----------
    times : ndarray, shape (n_times,)
        Strictly increasing time grid shared by all runs.
    outputs : ndarray, shape (n_times, n_runs)
        One output column per simulation run.
    params : ndarray, shape (n_runs, n_params)
        Parameter vector of each run.
    param_names : list of str
        Column names for ``params``.
    train_idx, test_idx : ndarray of int
        Disjoint run indices (0-based) whose union covers all runs.
    seed : int or None
        Seed used to draw the split, if any.
    metadata : dict
        Free-form provenance (generator name, config, warnings).
    """

    times: np.ndarray
    outputs: np.ndarray
    params: np.ndarray
    param_names: list
    train_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    seed: int = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = check_strictly_increasing(self.times)
        self.outputs = as_float_array(self.outputs, name="outputs", ndim=2)
        self.params = as_float_array(self.params, name="params", ndim=2)
        n_times, n_runs = self.outputs.shape
        if self.times.shape[0] != n_times:
            raise ConfigError(
                f"outputs has {n_times} rows but times has {self.times.shape[0]} entries"
            )
        if self.params.shape[0] != n_runs:
            raise ConfigError(
                f"outputs has {n_runs} columns but params describes {self.params.shape[0]} runs"
            )
        if len(self.param_names) != self.params.shape[1]:
            raise ConfigError("param_names length does not match params columns")
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if self.train_idx.size or self.test_idx.size:
            combined = np.concatenate([self.train_idx, self.test_idx])
            if np.unique(combined).size != combined.size:
                raise ConfigError("train and test index sets overlap")
            if not np.array_equal(np.sort(combined), np.arange(n_runs)):
                raise ConfigError("train/test split must cover all runs exactly once")

    @property
    def n_times(self):
        return self.times.shape[0]

    @property
    def n_runs(self):
        return self.outputs.shape[1]

    def train_arrays(self):
        """Return (params, outputs-as-rows, times) for the training runs."""
        idx = self.train_idx
        return self.params[idx], self.outputs[:, idx].T, self.times

    def test_arrays(self):
        idx = self.test_idx
        return self.params[idx], self.outputs[:, idx].T, self.times


def split_dataset(ds, n_train, seed):
    """Randomly partition the runs into train and test sets.

    Uses a counter-based Philox generator keyed by ``seed`` so the split
    is reproducible across platforms.
    """
    n_runs = ds.n_runs
    if not 1 <= n_train < n_runs:
        raise ConfigError(
            f"n_train must satisfy 1 <= n_train < n_runs={n_runs}, got {n_train}"
        )
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    perm = rng.permutation(n_runs)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return TimeSeriesDataset(
        times=ds.times,
        outputs=ds.outputs,
        params=ds.params,
        param_names=list(ds.param_names),
        train_idx=train,
        test_idx=test,
        seed=int(seed),
        metadata=dict(ds.metadata),
    )


def subsample_times(ds, keep):
    """Restrict the time grid to the given sorted row indices.

    Parameters and split are unchanged.  ``keep`` must be a nonempty,
    sorted subset of ``range(n_times)``.
    """
    keep = np.asarray(keep, dtype=int)
    if keep.size == 0:
        raise ConfigError("keep index set must not be empty")
    if np.any(np.diff(keep) <= 0):
        raise ConfigError("keep index set must be sorted and without duplicates")
    if keep[0] < 0 or keep[-1] >= ds.n_times:
        raise ConfigError(
            f"keep indices must lie in [0, {ds.n_times - 1}], got range "
            f"[{keep[0]}, {keep[-1]}]"
        )
    meta = dict(ds.metadata)
    meta["subsampled_from"] = int(ds.n_times)
    return TimeSeriesDataset(
        times=ds.times[keep],
        outputs=ds.outputs[keep, :],
        params=ds.params,
        param_names=list(ds.param_names),
        train_idx=ds.train_idx,
        test_idx=ds.test_idx,
        seed=ds.seed,
        metadata=meta,
    )


def even_subsample_indices(n_total, n_keep):
    """Evenly spaced row indices including both endpoints."""
    if not 2 <= n_keep <= n_total:
        raise ConfigError(f"n_keep must be in [2, {n_total}], got {n_keep}")
    return np.unique(np.round(np.linspace(0, n_total - 1, n_keep)).astype(int))


def atomic_write(path, writer):
    """Write a file via a temp file + rename so readers never see partial data."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_csv_matrix(path, array, header_cols):
    array = np.atleast_2d(array)

    def writer(fh):
        fh.write(",".join(header_cols) + "\n")
        np.savetxt(fh, array, fmt=FLOAT_FMT, delimiter=",")

    atomic_write(path, writer)


def read_csv_matrix(path, name):
    if not os.path.exists(path):
        raise ConfigError(f"missing dataset file: {path}")
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise ConfigError(f"malformed header in {path}")
        cols = header.split(",")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ConfigError(f"malformed rows in {path}: {exc}") from exc
    if data.size and data.shape[1] != len(cols):
        raise ConfigError(
            f"{name}: header names {len(cols)} columns but rows have {data.shape[1]}"
        )
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{name} contains non-finite values")
    return cols, data


def write_dataset(ds, path):
    """Persist a dataset to a directory (created if needed)."""
    os.makedirs(path, exist_ok=True)
    write_csv_matrix(os.path.join(path, "times.csv"), ds.times.reshape(-1, 1), ["t"])
    run_cols = [f"run_{i + 1:04d}" for i in range(ds.n_runs)]
    write_csv_matrix(os.path.join(path, "outputs.csv"), ds.outputs, run_cols)
    write_csv_matrix(os.path.join(path, "params.csv"), ds.params, list(ds.param_names))
    split = {
        "train": [int(i) for i in ds.train_idx],
        "test": [int(i) for i in ds.test_idx],
        "seed": ds.seed,
    }
    atomic_write(
        os.path.join(path, "split.json"),
        lambda fh: json.dump(split, fh, indent=1),
    )
    if ds.metadata:
        atomic_write(
            os.path.join(path, "meta.json"),
            lambda fh: json.dump(ds.metadata, fh, indent=1, default=str),
        )


def read_dataset(path):
    """Load a dataset directory written by :func:`write_dataset`."""
    _, times = read_csv_matrix(os.path.join(path, "times.csv"), "times.csv")
    _, outputs = read_csv_matrix(os.path.join(path, "outputs.csv"), "outputs.csv")
    param_names, params = read_csv_matrix(os.path.join(path, "params.csv"), "params.csv")
    if outputs.shape[1] != params.shape[0]:
        raise ConfigError(
            f"outputs.csv has {outputs.shape[1]} run columns but params.csv has "
            f"{params.shape[0]} rows"
        )
    split_path = os.path.join(path, "split.json")
    if not os.path.exists(split_path):
        raise ConfigError(f"missing dataset file: {split_path}")
    with open(split_path) as fh:
        split = json.load(fh)
    meta_path = os.path.join(path, "meta.json")
    metadata = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            metadata = json.load(fh)
    return TimeSeriesDataset(
        times=times[:, 0],
        outputs=outputs,
        params=params,
        param_names=param_names,
        train_idx=np.asarray(split["train"], dtype=int),
        test_idx=np.asarray(split["test"], dtype=int),
        seed=split.get("seed"),
        metadata=metadata,
    )
