"""Regular latitude/longitude grids and the field containers built on them.

Everything downstream indexes space by a flat gridpoint index ``g`` running
row-major over (lat, lon), with latitudes ascending from ``lat_start``.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPOCH = dt.date(1970, 1, 1)


class DimensionError(ValueError):
    """Array shapes disagree with a grid or with each other."""


def to_epoch_days(dates: Sequence[dt.date]) -> np.ndarray:
    return np.array([(d - EPOCH).days for d in dates], dtype=np.int64)


def from_epoch_days(days) -> list[dt.date]:
    return [EPOCH + dt.timedelta(days=int(d)) for d in days]


def normalize_lon(lon):
    """Map longitudes to [-180, 180)."""
    return (np.asarray(lon, dtype=np.float64) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class Grid:
    lat_start: float
    lat_step: float
    n_lat: int
    lon_start: float
    lon_step: float
    n_lon: int

    def __post_init__(self):
        if int(self.n_lat) < 1 or int(self.n_lon) < 1:
            raise ValueError(f"grid needs n_lat, n_lon >= 1, got {self.n_lat}x{self.n_lon}")
        for name in ("lat_start", "lat_step", "lon_start", "lon_step"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"grid {name} is not finite")
        if not (self.lat_step > 0 and self.lon_step > 0):
            raise ValueError("grid steps must be strictly positive")
        if self.lat_step > 180.0 or self.lon_step > 360.0:
            raise ValueError(f"grid steps {self.lat_step}, {self.lon_step} exceed the sphere (180, 360)")
        lat_end = self.lat_start + (self.n_lat - 1) * self.lat_step
        if self.lat_start < -90.0 or lat_end > 90.0:
            raise ValueError(f"latitudes [{self.lat_start}, {lat_end}] leave [-90, 90]")
        if (self.n_lon - 1) * self.lon_step >= 360.0:
            raise ValueError("longitude span wraps onto itself")
        if np.sum(self.row_weights) <= 0.0:
            raise ValueError("grid weights sum to zero (all rows at the poles)")
        object.__setattr__(self, "n_lat", int(self.n_lat))
        object.__setattr__(self, "n_lon", int(self.n_lon))
        object.__setattr__(self, "lon_start", float(normalize_lon(self.lon_start)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def size(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start + self.lat_step * np.arange(self.n_lat)

    @property
    def lons(self) -> np.ndarray:
        return normalize_lon(self.lon_start + self.lon_step * np.arange(self.n_lon))

    @property
    def lons_unwrapped(self) -> np.ndarray:
        """Monotone longitudes starting at ``lon_start`` (may exceed 180)."""
        return self.lon_start + self.lon_step * np.arange(self.n_lon)

    @property
    def row_weights(self) -> np.ndarray:
        w = np.cos(np.deg2rad(self.lats))
        # cos(+-90 deg) is ~6e-17, not 0
        return np.where(np.abs(self.lats) >= 90.0, 0.0, w)

    @property
    def weights(self) -> np.ndarray:
        """Per-gridpoint cosine-latitude weights, flat (G,)."""
        return np.repeat(self.row_weights, self.n_lon)

    def point_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (lat, lon) of every gridpoint, row-major."""
        lat2, lon2 = np.meshgrid(self.lats, self.lons, indexing="ij")
        return lat2.ravel(), lon2.ravel()

    def subgrid(self, row0: int, col0: int, n_lat: int, n_lon: int) -> "Grid":
        return Grid(self.lat_start + row0 * self.lat_step, self.lat_step, n_lat,
                    self.lon_start + col0 * self.lon_step, self.lon_step, n_lon)

    def to_tuple(self) -> tuple:
        return (self.lat_start, self.lat_step, self.n_lat, self.lon_start, self.lon_step, self.n_lon)


def _check_values(values: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape != shape:
        raise DimensionError(f"{what} values have shape {values.shape}, expected {shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains NaN or Inf")
    values.setflags(write=False)
    return values


def _check_times(times: Sequence[dt.date], strict: bool = True) -> tuple:
    times = tuple(times)
    days = to_epoch_days(times)
    if strict and np.any(np.diff(days) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


@dataclass(frozen=True, eq=False)
class Field:
    """Deterministic data, values shaped (T, G)."""

    grid: Grid
    times: tuple
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        object.__setattr__(self, "times", _check_times(self.times))
        object.__setattr__(self, "values",
                           _check_values(self.values, (len(self.times), self.grid.size), "Field"))

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return (self.grid == other.grid and self.times == other.times and self.units == other.units
                and np.array_equal(self.values, other.values))

    __hash__ = None

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def epoch_days(self) -> np.ndarray:
        return to_epoch_days(self.times)

    def select(self, index) -> "Field":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Field(self.grid, [self.times[i] for i in index], self.values[index], self.units)

    def with_values(self, values: np.ndarray, units: str | None = None) -> "Field":
        return Field(self.grid, self.times, values, self.units if units is None else units)

    def as_maps(self) -> np.ndarray:
        return self.values.reshape(self.n_times, *self.grid.shape)


@dataclass(frozen=True, eq=False)
class EnsembleField:
    """Ensemble data, values shaped (T, L, M, G) over (init, lead, member, gridpoint)."""

    grid: Grid
    inits: tuple
    values: np.ndarray
    units: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "inits", _check_times(self.inits))
        v = np.asarray(self.values)
        if v.ndim != 4:
            raise DimensionError(f"EnsembleField values must be 4-d (T, L, M, G), got {v.ndim}-d")
        if v.shape[1] < 1 or v.shape[2] < 1:
            raise DimensionError("EnsembleField needs L >= 1 and M >= 1")
        object.__setattr__(self, "values",
                           _check_values(v, (len(self.inits), v.shape[1], v.shape[2], self.grid.size),
                                         "EnsembleField"))

    def __eq__(self, other):
        if not isinstance(other, EnsembleField):
            return NotImplemented
        return (self.grid == other.grid and self.inits == other.inits and self.units == other.units
                and np.array_equal(self.values, other.values))

    __hash__ = None

    @property
    def n_inits(self) -> int:
        return self.values.shape[0]

    @property
    def n_lead(self) -> int:
        return self.values.shape[1]

    @property
    def n_members(self) -> int:
        return self.values.shape[2]

    @property
    def epoch_days(self) -> np.ndarray:
        return to_epoch_days(self.inits)

    def select(self, index) -> "EnsembleField":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return EnsembleField(self.grid, [self.inits[i] for i in index], self.values[index],
                             self.units, dict(self.metadata))

    def with_values(self, values: np.ndarray, units: str | None = None) -> "EnsembleField":
        return EnsembleField(self.grid, self.inits, values,
                             self.units if units is None else units, dict(self.metadata))

    def deterministic(self) -> np.ndarray:
        """(T, L, G) view of a single-member ensemble."""
        if self.n_members != 1:
            raise DimensionError(f"expected a single-member ensemble, got M={self.n_members}")
        return self.values[:, :, 0, :]


def latitude_weighted_mean(per_grid, grid: Grid) -> float:
    """Cosine-latitude weighted mean over the last axis.

    Returns a float for 1-d input, otherwise an array of the leading shape.
    """
    v = np.asarray(per_grid, dtype=np.float64)
    if v.shape[-1:] != (grid.size,):
        raise DimensionError(f"last axis has length {v.shape[-1:]} but grid has G={grid.size}")
    w = grid.weights
    out = (v @ w) / w.sum()
    return float(out) if v.ndim == 1 else out


def ensemble_mean(ens: EnsembleField | np.ndarray) -> np.ndarray:
    """Member mean, (T, L, M, G) -> (T, L, G)."""
    v = ens.values if isinstance(ens, EnsembleField) else np.asarray(ens, dtype=np.float64)
    return v.mean(axis=2)
