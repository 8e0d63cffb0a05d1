"""Exposure datasets, standardization, k selection and the CSV format."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
import logging
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
import pandas as pd

from .const import (
    COL_ID,
    COL_Y,
    FLOAT_FORMAT,
    K_SELECT_THRESHOLD,
    PREFIX_COVARIATE,
    PREFIX_EXPOSURE,
)
from .errors import DegenerateColumnError, InputError

_LOGGER = logging.getLogger(__name__)

# Absorbs SVD round-off so that an exact tie at the threshold is not "> 0.9"
K_SELECT_TIE_TOL = 1e-10


@dataclass(frozen=True)
class ExposureDataset:
    """Outcome, longitudinal exposures and covariates for n subjects.

    ``x`` has shape (n, p, T) in exposure-major, time-minor order; masked
    entries are NaN in ``x`` and True in ``mask``.
    """

    y: NDArray[np.float64]
    x: NDArray[np.float64]
    mask: NDArray[np.bool_]
    z: NDArray[np.float64]
    exposure_names: tuple[str, ...]
    covariate_names: tuple[str, ...] = ()
    times: tuple[int, ...] = ()
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Fill defaults and check shapes."""
        n, p, t = self.x.shape
        if self.y.shape != (n,):
            raise InputError(f"y has shape {self.y.shape}, expected ({n},)")
        if self.mask.shape != self.x.shape:
            raise InputError("Missing-value mask must match the exposure tensor")
        if self.z.shape[0] != n or self.z.ndim != 2:
            raise InputError(f"Covariate matrix has shape {self.z.shape}, expected ({n}, c)")
        if len(self.exposure_names) != p:
            raise InputError(f"Expected {p} exposure names, got {len(self.exposure_names)}")
        if len(self.covariate_names) != self.z.shape[1]:
            raise InputError("Covariate names do not match the covariate matrix")
        if not self.times:
            object.__setattr__(self, "times", tuple(range(1, t + 1)))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i + 1) for i in range(n)))
        if len(self.times) != t or len(self.ids) != n:
            raise InputError("Time labels or ids do not match the data dimensions")

    @classmethod
    def from_arrays(
        cls,
        y: NDArray[np.float64],
        x: NDArray[np.float64],
        z: NDArray[np.float64] | None = None,
        exposure_names: Sequence[str] | None = None,
        covariate_names: Sequence[str] | None = None,
    ) -> ExposureDataset:
        """Build a dataset, deriving the mask from NaN entries of ``x``."""
        x_arr = np.asarray(x, dtype=float)
        n, p, _ = x_arr.shape
        z_arr = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        names = tuple(exposure_names) if exposure_names else tuple(f"e{j + 1}" for j in range(p))
        cov_names = (
            tuple(covariate_names)
            if covariate_names
            else tuple(f"c{j + 1}" for j in range(z_arr.shape[1]))
        )
        return cls(
            y=np.asarray(y, dtype=float),
            x=x_arr,
            mask=np.isnan(x_arr),
            z=z_arr,
            exposure_names=names,
            covariate_names=cov_names,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def T(self) -> int:  # pylint: disable=invalid-name
        return self.x.shape[2]

    @property
    def c(self) -> int:
        return self.z.shape[1]

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())

    def missing_index(self) -> NDArray[np.int64]:
        """Return (i, j, t) triples of masked entries in row-major order."""
        return np.argwhere(self.mask)

    def column_label(self, j: int, t: int) -> str:
        """Return the CSV header of exposure j at time index t."""
        return f"{PREFIX_EXPOSURE}{self.exposure_names[j]}_{self.times[t]}"

    def exposure_labels(self) -> list[str]:
        """Labels of the pT exposure coordinates, exposure-major."""
        return [f"{name}_t{time}" for name in self.exposure_names for time in self.times]

    def validate(self) -> None:
        """Check the invariants required before fitting.

        Raises:
            InputError: If the data has no subjects or contains invalid values

        """
        if self.n < 1:
            raise InputError("Dataset has no subjects")
        if not np.all(np.isfinite(self.y)):
            raise InputError("Outcome y must not contain missing values")
        if not np.all(np.isfinite(self.x[~self.mask])):
            raise InputError("Observed exposures must be finite")
        if not np.all(np.isfinite(self.z)):
            raise InputError("Covariates must not contain missing values")

    def subset(self, rows: Sequence[int] | NDArray[np.int64]) -> ExposureDataset:
        """Return the subjects at the given row positions."""
        idx = np.asarray(rows, dtype=int)
        return replace(
            self,
            y=self.y[idx],
            x=self.x[idx],
            mask=self.mask[idx],
            z=self.z[idx],
            ids=tuple(self.ids[i] for i in idx),
        )

    def covariate_index(self, name: str) -> int:
        """Return the column of covariate ``name``.

        Raises:
            InputError: If no such covariate exists

        """
        try:
            return self.covariate_names.index(name)
        except ValueError as err:
            raise InputError(f"Unknown covariate column {name!r}") from err


@dataclass(frozen=True)
class StandardizationRecord:
    """Column means and standard deviations used by :func:`standardize`."""

    y_mean: float
    y_sd: float
    x_mean: NDArray[np.float64]
    x_sd: NDArray[np.float64]
    z_mean: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    z_sd: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))

    def unstandardize_y(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Map standardized outcomes back to the original scale."""
        return np.asarray(values) * self.y_sd + self.y_mean

    def unstandardize_x(self, values: NDArray[np.float64], j: int, t: int) -> NDArray[np.float64]:
        """Map standardized exposure values of column (j, t) back."""
        return np.asarray(values) * self.x_sd[j, t] + self.x_mean[j, t]

    def apply(self, raw: ExposureDataset) -> ExposureDataset:
        """Standardize new data with the stored statistics; masked cells stay masked."""
        if self.x_mean.shape != (raw.p, raw.T) or self.z_mean.shape != (raw.c,):
            raise InputError("Dataset does not match the standardization record")
        x = np.where(raw.mask, np.nan, (raw.x - self.x_mean) / self.x_sd)
        return replace(
            raw,
            y=(raw.y - self.y_mean) / self.y_sd,
            x=x,
            z=(raw.z - self.z_mean) / self.z_sd,
        )

    def to_frame(self, data: ExposureDataset) -> pd.DataFrame:
        """Tabulate the record with one row per column."""
        rows = [(COL_Y, self.y_mean, self.y_sd)]
        for j in range(data.p):
            for t in range(data.T):
                rows.append((data.column_label(j, t), self.x_mean[j, t], self.x_sd[j, t]))
        for j, name in enumerate(data.covariate_names):
            rows.append((f"{PREFIX_COVARIATE}{name}", self.z_mean[j], self.z_sd[j]))
        return pd.DataFrame(rows, columns=["column", "mean", "sd"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, p: int, t: int) -> StandardizationRecord:
        """Inverse of :meth:`to_frame`."""
        values = frame[["mean", "sd"]].to_numpy(dtype=float)
        x_vals = values[1 : 1 + p * t]
        z_vals = values[1 + p * t :]
        return cls(
            y_mean=float(values[0, 0]),
            y_sd=float(values[0, 1]),
            x_mean=x_vals[:, 0].reshape(p, t),
            x_sd=x_vals[:, 1].reshape(p, t),
            z_mean=z_vals[:, 0],
            z_sd=z_vals[:, 1],
        )


def _column_stats(values: NDArray[np.float64], label: str) -> tuple[float, float]:
    observed = values[np.isfinite(values)]
    if observed.size < 2:
        raise DegenerateColumnError(label, "fewer than 2 observed values")
    sd = float(np.std(observed, ddof=1))
    if not sd > 0.0:
        raise DegenerateColumnError(label, "zero variance")
    return float(np.mean(observed)), sd


def standardize(
    raw: ExposureDataset, keep_covariates: Sequence[str] = ()
) -> tuple[ExposureDataset, StandardizationRecord]:
    """Center and scale y, every (exposure, time) column and the covariates.

    Statistics are computed over observed entries only, with divisor n - 1.
    Covariates named in ``keep_covariates`` (binary indicators) are left as is.

    Args:
        raw: Dataset on the original scale
        keep_covariates: Covariate names excluded from scaling

    Returns:
        Standardized dataset and the record that inverts the transform

    Raises:
        DegenerateColumnError: If a column is constant or nearly empty

    """
    y_mean, y_sd = _column_stats(raw.y, COL_Y)
    x_mean = np.zeros((raw.p, raw.T))
    x_sd = np.ones((raw.p, raw.T))
    x_std = raw.x.copy()
    for j in range(raw.p):
        for t in range(raw.T):
            column = np.where(raw.mask[:, j, t], np.nan, raw.x[:, j, t])
            x_mean[j, t], x_sd[j, t] = _column_stats(column, raw.column_label(j, t))
            observed = ~raw.mask[:, j, t]
            x_std[observed, j, t] = (raw.x[observed, j, t] - x_mean[j, t]) / x_sd[j, t]

    z_mean = np.zeros(raw.c)
    z_sd = np.ones(raw.c)
    z_std = raw.z.copy()
    for j, name in enumerate(raw.covariate_names):
        if name in keep_covariates:
            continue
        z_mean[j], z_sd[j] = _column_stats(raw.z[:, j], f"{PREFIX_COVARIATE}{name}")
        z_std[:, j] = (raw.z[:, j] - z_mean[j]) / z_sd[j]

    record = StandardizationRecord(y_mean, y_sd, x_mean, x_sd, z_mean, z_sd)
    data = replace(raw, y=(raw.y - y_mean) / y_sd, x=x_std, z=z_std)
    _LOGGER.debug("Standardized %d subjects, %d exposure columns", raw.n, raw.p * raw.T)
    return data, record


def mean_impute(data: ExposureDataset) -> ExposureDataset:
    """Replace masked exposures by their observed column means.

    The returned dataset has an empty mask.
    """
    if data.n_missing == 0:
        return data
    _LOGGER.warning(
        "Mean-imputing %d missing exposure values; uncertainty in them is ignored",
        data.n_missing,
    )
    filled = np.where(data.mask, np.nan, data.x)
    means = np.nanmean(filled, axis=0)
    means = np.where(np.isfinite(means), means, 0.0)
    filled = np.where(data.mask, means[None, :, :], filled)
    return replace(data, x=filled, mask=np.zeros_like(data.mask))


def select_k(x: NDArray[np.float64], mask: NDArray[np.bool_] | None = None) -> int:
    """Choose the number of factors from the singular values of the data.

    The (nT) x p matrix stacks every time slice of ``x`` row-wise; missing
    entries are replaced by their column mean first. The result is the
    smallest k whose cumulative singular-value share is strictly above 0.9.

    Raises:
        InputError: If the tensor is empty

    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 3 or arr.size == 0:
        raise InputError(f"select_k needs a nonempty (n, p, T) tensor, got shape {arr.shape}")
    if mask is not None:
        arr = np.where(mask, np.nan, arr)
    if np.isnan(arr).any():
        means = np.nanmean(arr, axis=0)
        arr = np.where(np.isnan(arr), np.nan_to_num(means)[None, :, :], arr)
    n, p, t = arr.shape
    stacked = arr.transpose(2, 0, 1).reshape(n * t, p)
    singular = np.linalg.svd(stacked, compute_uv=False)
    total = singular.sum()
    if not total > 0.0:
        raise InputError("select_k needs a tensor with a nonzero entry")
    share = np.cumsum(singular) / total
    above = np.flatnonzero(share > K_SELECT_THRESHOLD + K_SELECT_TIE_TOL)
    k = int(above[0]) + 1 if above.size else p
    _LOGGER.debug("select_k: shares %s -> k = %d", np.round(share, 4), k)
    return min(k, p)


# ---------------------------------------------------------------------------
# CSV format: id, y, cov_<name>..., x_<exposure>_<t>...
# ---------------------------------------------------------------------------


def _parse_exposure_header(column: str) -> tuple[str, int]:
    body = column[len(PREFIX_EXPOSURE) :]
    name, sep, time = body.rpartition("_")
    if not sep or not name:
        raise InputError(f"Exposure column {column!r} must look like x_<exposure>_<time>")
    try:
        return name, int(time)
    except ValueError as err:
        raise InputError(f"Exposure column {column!r} has a non-integer time") from err


def read_dataset(path: str | Path) -> ExposureDataset:
    """Read a wide CSV file; blank exposure cells become masked entries.

    Raises:
        InputError: If the file does not follow the schema
        OSError: If the file cannot be read

    """
    try:
        frame = pd.read_csv(path, dtype={COL_ID: str}, keep_default_na=False, na_values=[""])
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise InputError(f"Cannot parse {path}: {err}") from err

    if COL_ID not in frame.columns or COL_Y not in frame.columns:
        raise InputError(f"{path} must contain {COL_ID!r} and {COL_Y!r} columns")

    cov_cols = [col for col in frame.columns if col.startswith(PREFIX_COVARIATE)]
    x_cols = [col for col in frame.columns if col.startswith(PREFIX_EXPOSURE)]
    unknown = set(frame.columns) - {COL_ID, COL_Y, *cov_cols, *x_cols}
    if unknown:
        raise InputError(f"Unrecognized columns in {path}: {sorted(unknown)}")
    if not x_cols:
        raise InputError(f"{path} has no exposure columns")

    names: list[str] = []
    times: set[int] = set()
    parsed = {}
    for col in x_cols:
        name, time = _parse_exposure_header(col)
        if name not in names:
            names.append(name)
        times.add(time)
        parsed[(name, time)] = col
    sorted_times = sorted(times)
    if len(parsed) != len(names) * len(sorted_times):
        raise InputError(f"{path} does not contain every exposure at every time")

    try:
        numeric = frame.drop(columns=[COL_ID]).apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as err:
        raise InputError(f"Non-numeric value in {path}: {err}") from err

    n = len(frame)
    x = np.empty((n, len(names), len(sorted_times)))
    for j, name in enumerate(names):
        for t, time in enumerate(sorted_times):
            x[:, j, t] = numeric[parsed[(name, time)]].to_numpy(dtype=float)
    z = numeric[cov_cols].to_numpy(dtype=float) if cov_cols else np.zeros((n, 0))
    data = ExposureDataset(
        y=numeric[COL_Y].to_numpy(dtype=float),
        x=x,
        mask=np.isnan(x),
        z=z,
        exposure_names=tuple(names),
        covariate_names=tuple(col[len(PREFIX_COVARIATE) :] for col in cov_cols),
        times=tuple(sorted_times),
        ids=tuple(frame[COL_ID].astype(str)),
    )
    data.validate()
    _LOGGER.info(
        "Read %d subjects, %d exposures x %d times, %d covariates, %d missing from %s",
        data.n, data.p, data.T, data.c, data.n_missing, path,
    )
    return data


def dataset_frame(data: ExposureDataset) -> pd.DataFrame:
    """Lay a dataset out in the wide CSV schema."""
    columns: dict[str, object] = {COL_ID: list(data.ids), COL_Y: data.y}
    for j, name in enumerate(data.covariate_names):
        columns[f"{PREFIX_COVARIATE}{name}"] = data.z[:, j]
    for j in range(data.p):
        for t in range(data.T):
            columns[data.column_label(j, t)] = np.where(data.mask[:, j, t], np.nan, data.x[:, j, t])
    return pd.DataFrame(columns)


def write_dataset(data: ExposureDataset, path: str | Path) -> None:
    """Write a dataset; masked entries become empty fields."""
    dataset_frame(data).to_csv(
        path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n"
    )
    _LOGGER.debug("Wrote %d subjects to %s", data.n, path)
