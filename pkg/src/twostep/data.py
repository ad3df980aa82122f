"""Dataset loading, deterministic subsetting, splitting, and standardization.

A DatasetHandle owns the full feature/target matrices. Subsets and splits
are index views over a handle: cheap, immutable, and safe for concurrent
readers. All index draws come from the package's own splitmix64 stream, so
the same (n, fraction, seed) triple produces the same rows on any machine.

Rounding conventions, fixed here and relied on by the cost accounting:
subset size is floor(p * n) clamped to at least one row; train size is
round-half-up(train_fraction * m).
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .space import RandomStream, permutation_array

INPUT_COLUMNS = (
    "Tair", "Pressure", "rh", "wbar",
    "num_aer_1", "num_aer_2", "num_aer_3", "num_aer_4",
    "r_aer_1", "r_aer_2", "r_aer_3", "r_aer_4",
    "kappa_1", "kappa_2", "kappa_3", "kappa_4",
)
TARGET_COLUMNS = ("fn_1", "fn_2", "fn_3", "fn_4")


class DataError(ValueError):
    """Dataset construction, parsing, or view-building failure."""


@dataclass(frozen=True)
class DatasetHandle:
    """Columnar numeric dataset held fully in memory as float64 matrices."""

    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...]
    target_names: tuple[str, ...]
    provenance: dict

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        t = np.asarray(self.targets, dtype=np.float64)
        if f.ndim != 2 or t.ndim != 2:
            raise DataError("features and targets must be 2-D matrices")
        if f.shape[0] != t.shape[0]:
            raise DataError("features and targets disagree on row count")
        if f.shape[0] < 1:
            raise DataError("dataset must contain at least one row")
        if f.shape[1] != len(self.feature_names):
            raise DataError("feature column count does not match names")
        if t.shape[1] != len(self.target_names):
            raise DataError("target column count does not match names")
        if not np.all(np.isfinite(f)) or not np.all(np.isfinite(t)):
            raise DataError("dataset contains NaN or Inf values")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "target_names", tuple(self.target_names))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.features.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]


def subset_size(n_samples: int, p_subset: float) -> int:
    """floor(p * n), clamped to >= 1. The small epsilon absorbs cases where
    p * n is an exact integer but the float product lands just below it."""
    if not 0 < p_subset <= 1:
        raise DataError("p_subset must be in (0, 1]")
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    return max(1, int(math.floor(p_subset * n_samples + 1e-9)))


def draw_subset_indices(n_samples: int, p_subset: float, subset_seed: int) -> np.ndarray:
    """Draw floor(p * n) unique row indices, returned sorted ascending.

    Uses a partial Fisher-Yates shuffle with a sparse swap table, so memory
    is O(k) even when n is tens of millions. p_subset = 1 returns the
    identity index list.
    """
    k = subset_size(n_samples, p_subset)
    if k == n_samples:
        return np.arange(n_samples, dtype=np.int64)
    stream = RandomStream(subset_seed)
    state: dict[int, int] = {}
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        j = i + stream.below(n_samples - i)
        vi = state.get(i, i)
        vj = state.get(j, j)
        state[i] = vj
        state[j] = vi
        out[i] = vj
    out.sort()
    return out


@dataclass(frozen=True)
class SubsetView:
    """A deterministic subset of a handle's rows."""

    handle: DatasetHandle
    indices: np.ndarray
    p_subset: float
    subset_seed: int

    @property
    def n_rows(self) -> int:
        return int(self.indices.shape[0])

    def features(self) -> np.ndarray:
        return self.handle.features[self.indices]

    def targets(self) -> np.ndarray:
        return self.handle.targets[self.indices]


def make_subset(handle: DatasetHandle, p_subset: float, subset_seed: int) -> SubsetView:
    indices = draw_subset_indices(handle.n_samples, p_subset, subset_seed)
    return SubsetView(handle, indices, float(p_subset), int(subset_seed))


def train_size(n_rows: int, train_fraction: float) -> int:
    """round-half-up(train_fraction * n_rows)."""
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must be in (0, 1)")
    return int(math.floor(train_fraction * n_rows + 0.5 + 1e-9))


@dataclass(frozen=True)
class SplitView:
    """Disjoint, exhaustive train/validation partition of a view's rows."""

    handle: DatasetHandle
    train_indices: np.ndarray
    val_indices: np.ndarray
    train_fraction: float
    split_seed: int

    def train_features(self) -> np.ndarray:
        return self.handle.features[self.train_indices]

    def train_targets(self) -> np.ndarray:
        return self.handle.targets[self.train_indices]

    def val_features(self) -> np.ndarray:
        return self.handle.features[self.val_indices]

    def val_targets(self) -> np.ndarray:
        return self.handle.targets[self.val_indices]


def make_split(
    view: Union[DatasetHandle, SubsetView],
    train_fraction: float,
    split_seed: int,
) -> SplitView:
    """Partition a view's rows into train and validation sets.

    The permutation comes from the package's splitmix64 key sort, so it is
    deterministic and independent of the platform's RNG. Both sides must end
    up non-empty.
    """
    if isinstance(view, SubsetView):
        handle, pool = view.handle, view.indices
    else:
        handle, pool = view, np.arange(view.n_samples, dtype=np.int64)
    m = int(pool.shape[0])
    if m < 1:
        raise DataError("cannot split an empty view")
    n_train = train_size(m, train_fraction)
    if n_train < 1 or n_train >= m:
        raise DataError(
            f"degenerate split: {n_train} train / {m - n_train} validation rows")
    order = permutation_array(m, split_seed)
    train_idx = np.sort(pool[order[:n_train]])
    val_idx = np.sort(pool[order[n_train:]])
    return SplitView(handle, train_idx, val_idx, float(train_fraction), int(split_seed))


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-score transform fitted on a designated set of rows.

    Standard deviations use the population convention (denominator n).
    Constant columns are rejected at fit time because they cannot be scaled.
    """

    mean: np.ndarray
    std: np.ndarray
    column_names: tuple[str, ...]

    @classmethod
    def fit(cls, rows: np.ndarray, column_names: Sequence[str] | None = None) -> "Standardizer":
        x = np.asarray(rows, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise DataError("standardizer needs a 2-D matrix with >= 2 rows")
        names = tuple(column_names) if column_names is not None else tuple(
            f"col_{i}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("column_names length does not match matrix width")
        mean = x.mean(axis=0)
        std = x.std(axis=0)  # ddof=0
        for i, s in enumerate(std):
            if s <= 0.0:
                raise DataError(f"constant column '{names[i]}' cannot be standardized")
        return cls(mean, std, names)

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "column_names": list(self.column_names),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Standardizer":
        return cls(
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["std"], dtype=np.float64),
            tuple(obj["column_names"]),
        )


def manifest_path_for(csv_path: str) -> str:
    return csv_path + ".manifest.json"


def load_csv(path: str, targets: Sequence[str] | None = None) -> DatasetHandle:
    """Load a numeric CSV with a header row into a DatasetHandle.

    Target columns come from ``targets`` or, if omitted, from the sidecar
    manifest ``<path>.manifest.json`` ({"targets": [...]}). Parse errors
    name the offending data row and column, both 1-based.
    """
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    if targets is None:
        mpath = manifest_path_for(path)
        if not os.path.exists(mpath):
            raise DataError(
                f"no target columns given and no manifest at {mpath}")
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        targets = manifest.get("targets")
        if not targets:
            raise DataError(f"manifest {mpath} lacks a non-empty 'targets' list")

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        missing = [t for t in targets if t not in header]
        if missing:
            raise DataError(f"target columns not in header: {missing}")
        width = len(header)
        rows: list[list[float]] = []
        for row_num, cells in enumerate(reader, start=1):
            if len(cells) != width:
                raise DataError(
                    f"row {row_num}: expected {width} cells, found {len(cells)}")
            parsed = []
            for col_num, cell in enumerate(cells, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"non-numeric cell at row {row_num}, column {col_num}: "
                        f"{cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(
                        f"non-finite cell at row {row_num}, column {col_num}: "
                        f"{cell!r}")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path} has a header but no data rows")

    matrix = np.asarray(rows, dtype=np.float64)
    target_set = set(targets)
    feat_cols = [i for i, name in enumerate(header) if name not in target_set]
    targ_cols = [header.index(t) for t in targets]
    return DatasetHandle(
        features=matrix[:, feat_cols],
        targets=matrix[:, targ_cols],
        feature_names=tuple(header[i] for i in feat_cols),
        target_names=tuple(targets),
        provenance={"kind": "csv", "path": os.path.abspath(path)},
    )


def write_csv(handle: DatasetHandle, path: str) -> None:
    """Write a handle to CSV plus its sidecar target manifest.

    Cells are written with repr so a load round-trips to within 1e-15
    relative (exactly, for float64).
    """
    header = list(handle.feature_names) + list(handle.target_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(handle.n_samples):
            row = [repr(float(v)) for v in handle.features[i]]
            row += [repr(float(v)) for v in handle.targets[i]]
            writer.writerow(row)
    with open(manifest_path_for(path), "w", encoding="utf-8") as fh:
        json.dump({"targets": list(handle.target_names)}, fh)
        fh.write("\n")


def compute_activation_targets(features: np.ndarray) -> np.ndarray:
    """Activated fractions for feature rows laid out as INPUT_COLUMNS.

    For each aerosol mode m (1-based):

        s_m = log10(wbar * kappa_m * r_aer_m) - log10(num_aer_m / 1000)
              + 5 * (rh - 0.8) - (Tair - 273) / 50
        fn_m = 1 / (1 + exp(-2 * s_m))

    A smooth stand-in with the right qualitative behavior (more particles
    competing for water vapor means a smaller activated fraction), not cloud
    physics. Pressure is a distractor input the targets ignore.
    """
    x = np.asarray(features, dtype=np.float64)
    tair, rh, wbar = x[:, 0], x[:, 2], x[:, 3]
    outputs = []
    for m in range(4):
        num_aer = x[:, 4 + m]
        r_aer = x[:, 8 + m]
        kappa = x[:, 12 + m]
        s = (np.log10(wbar * kappa * r_aer)
             - np.log10(num_aer / 1000.0)
             + 5.0 * (rh - 0.8)
             - (tair - 273.0) / 50.0)
        outputs.append(1.0 / (1.0 + np.exp(-2.0 * s)))
    return np.column_stack(outputs)


def generate_synthetic_activation(n_samples: int, gen_seed: int) -> DatasetHandle:
    """Generate a pseudo aerosol-activation regression dataset.

    Sixteen input columns (air temperature, pressure, relative humidity,
    updraft speed, then per-mode number concentration, dry radius, and
    hygroscopicity for four aerosol modes) drawn from plausible ranges, and
    four activated-fraction outputs in (0, 1) computed by
    compute_activation_targets. Deterministic given gen_seed; inputs are
    drawn in column order.
    """
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    rng = np.random.default_rng(gen_seed)
    n = int(n_samples)

    tair = rng.uniform(230.0, 310.0, n)
    pressure = rng.uniform(100.0, 1050.0, n)
    rh = rng.uniform(0.5, 1.02, n)
    wbar = 10.0 ** rng.uniform(0.0, math.log10(500.0), n)
    num_aer = [10.0 ** rng.uniform(1.0, 4.0, n) for _ in range(4)]
    r_aer = [10.0 ** rng.uniform(-2.0, 0.0, n) for _ in range(4)]
    kappa = [rng.uniform(0.001, 1.2, n) for _ in range(4)]

    features = np.column_stack([tair, pressure, rh, wbar, *num_aer, *r_aer, *kappa])
    targets = compute_activation_targets(features)

    return DatasetHandle(
        features=features,
        targets=targets,
        feature_names=INPUT_COLUMNS,
        target_names=TARGET_COLUMNS,
        provenance={"kind": "synthetic", "n_samples": n, "gen_seed": int(gen_seed)},
    )
