"""Regridding, weekly aggregation, climatology removal, detrending and normalization.

The same transforms apply to deterministic Fields and to EnsembleFields; for
an ensemble, the verifying date of init ``t`` at lead ``l`` (1-based) is
``t + 7 (l - 1)`` and every member is treated independently.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grid import (DimensionError, EnsembleField, Field, Grid, from_epoch_days,
                   latitude_weighted_mean, to_epoch_days)

SIGMA_FLOOR = 1e-8
DAYS_PER_WEEK = 7


class DomainError(ValueError):
    """Target grid extends outside the source grid."""


class MissingDataError(ValueError):
    pass


# -- regridding ---------------------------------------------------------------

def _interp_matrix(src: np.ndarray, dst: np.ndarray, axis_name: str) -> np.ndarray:
    """Row-stochastic matrix mapping values on ascending ``src`` to ``dst``."""
    tol = 1e-9
    if np.any(dst < src[0] - tol) or np.any(dst > src[-1] + tol):
        bad = dst[(dst < src[0] - tol) | (dst > src[-1] + tol)][0]
        raise DomainError(f"target {axis_name} {bad:g} outside source range [{src[0]:g}, {src[-1]:g}]")
    W = np.zeros((dst.size, src.size))
    if src.size == 1:
        W[:, 0] = 1.0
        return W
    dst = np.clip(dst, src[0], src[-1])
    i = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, src.size - 2)
    frac = (dst - src[i]) / (src[i + 1] - src[i])
    rows = np.arange(dst.size)
    W[rows, i] = 1.0 - frac
    W[rows, i + 1] += frac
    return W


def regrid_bilinear(data: Field | EnsembleField, target: Grid) -> Field | EnsembleField:
    """Bilinear interpolation onto ``target``; no extrapolation."""
    src = data.grid
    Wlat = _interp_matrix(src.lats, target.lats, "latitude")
    rel = (target.lons_unwrapped - src.lon_start) % 360.0
    rel = np.where(rel > 360.0 - 1e-9, rel - 360.0, rel)
    Wlon = _interp_matrix(src.lons_unwrapped, src.lon_start + rel, "longitude")
    v = data.values
    maps = v.reshape(*v.shape[:-1], src.n_lat, src.n_lon)
    out = np.einsum("ia,...ab,jb->...ij", Wlat, maps, Wlon, optimize=True)
    out = out.reshape(*v.shape[:-1], target.size)
    if isinstance(data, EnsembleField):
        return EnsembleField(target, data.inits, out, data.units, dict(data.metadata))
    return Field(target, data.times, out, data.units)


# -- weekly aggregation ---------------------------------------------------------

def lead_dates(inits: Sequence[dt.date], n_leads: int) -> np.ndarray:
    """Epoch day of the first day of each lead window, shaped (T, L)."""
    return to_epoch_days(inits)[:, None] + DAYS_PER_WEEK * np.arange(n_leads)[None, :]


def weekly_average(daily: Field, init_dates: Sequence[dt.date], n_leads: int = 1) -> EnsembleField:
    """Non-overlapping 7-day means after each init: lead ``l`` covers days [7(l-1), 7l-1].

    Returns a single-member EnsembleField shaped (T, L, 1, G).
    """
    if n_leads < 1:
        raise ValueError("n_leads must be >= 1")
    days = daily.epoch_days
    starts = lead_dates(init_dates, n_leads)
    need = starts[..., None] + np.arange(DAYS_PER_WEEK)
    pos = np.clip(np.searchsorted(days, need), 0, days.size - 1)
    ok = days[pos] == need
    if not np.all(ok):
        first = need[~ok].min()
        raise MissingDataError(f"daily data missing for {from_epoch_days([first])[0].isoformat()}")
    out = daily.values[pos].mean(axis=-2)
    return EnsembleField(daily.grid, list(init_dates), out[:, :, None, :], daily.units)


def weekly_series(daily: Field, dates: Sequence[dt.date]) -> Field:
    """Forward 7-day means at each requested start date, as a Field."""
    wk = weekly_average(daily, dates, 1)
    return Field(daily.grid, wk.inits, wk.values[:, 0, 0, :], daily.units)


# -- climatology and trend -----------------------------------------------------

def calendar_key(dates) -> np.ndarray:
    """month*100 + day, with Feb 29 folded onto Feb 28."""
    keys = np.array([d.month * 100 + d.day for d in dates], dtype=np.int64)
    return np.where(keys == 229, 228, keys)


def _years_before(date: dt.date, years: int) -> dt.date:
    day = 28 if (date.month, date.day) == (2, 29) else date.day
    return dt.date(date.year - years, date.month, day)


@dataclass(frozen=True)
class ClimatologyModel:
    """Per-calendar-date spatial-mean climatology, optionally with a fitted trend line."""

    window_years: int
    keys: np.ndarray
    values: np.ndarray
    slope: float | None = None
    intercept: float | None = None

    def __post_init__(self):
        if self.window_years < 1:
            raise ValueError("window_years must be >= 1")

    @property
    def has_trend(self) -> bool:
        return self.slope is not None

    def lookup(self, dates) -> np.ndarray:
        keys = calendar_key(dates)
        pos = np.clip(np.searchsorted(self.keys, keys), 0, self.keys.size - 1)
        hit = self.keys[pos] == keys
        if not np.all(hit):
            k = int(keys[~hit][0])
            raise MissingDataError(f"no climatology entry for calendar date {k // 100:02d}-{k % 100:02d}")
        return self.values[pos]

    def lookup_days(self, epoch_days: np.ndarray) -> np.ndarray:
        flat = np.asarray(epoch_days).ravel()
        return self.lookup(from_epoch_days(flat)).reshape(np.shape(epoch_days))

    def trend(self, epoch_days) -> np.ndarray:
        if not self.has_trend:
            raise ValueError("climatology carries no fitted trend")
        return self.intercept + self.slope * np.asarray(epoch_days, dtype=np.float64)


def fit_climatology(history: Field, window_years: int = 15, before: dt.date | None = None) -> ClimatologyModel:
    """Mean over the ``window_years`` years preceding ``before`` of the spatial mean per calendar date.

    ``before`` defaults to the day after the last history date.
    """
    if window_years < 1:
        raise ValueError("window_years must be >= 1")
    if before is None:
        before = history.times[-1] + dt.timedelta(days=1)
    start = _years_before(before, window_years)
    if history.times[0] > start:
        raise MissingDataError(
            f"insufficient history: {window_years}-year window before {before} needs data from "
            f"{start}, history starts {history.times[0]}")
    days = history.epoch_days
    sel = (days >= (start - dt.date(1970, 1, 1)).days) & (days < (before - dt.date(1970, 1, 1)).days)
    sub = history.select(sel)
    means = latitude_weighted_mean(sub.values, sub.grid)
    keys = calendar_key(sub.times)
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=means)
    counts = np.bincount(inv)
    return ClimatologyModel(window_years, uniq, sums / counts)


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if x.size < 2:
        raise ValueError(f"trend fit needs >= 2 time steps, got {x.size}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = dx @ dx
    if sxx == 0.0:
        raise ValueError("trend fit needs at least two distinct dates")
    slope = (dx @ (y - ym)) / sxx
    return float(slope), float(ym - slope * xm)


def fit_trend(field: Field, clim: ClimatologyModel) -> ClimatologyModel:
    """OLS of spatially averaged anomalies against epoch day; returns ``clim`` with the trend attached."""
    anom = field.values - clim.lookup(field.times)[:, None]
    series = latitude_weighted_mean(anom, field.grid)
    slope, intercept = _ols(field.epoch_days.astype(np.float64), series)
    return replace(clim, slope=slope, intercept=intercept)


def _verifying_days(data: Field | EnsembleField) -> np.ndarray:
    if isinstance(data, Field):
        return data.epoch_days
    return lead_dates(data.inits, data.n_lead)


def deseasonalize_detrend(data: Field | EnsembleField, clim: ClimatologyModel) -> Field | EnsembleField:
    """Subtract the spatial-mean climatology of each date, then the linear trend, from all gridpoints.

    If ``clim`` has no trend yet, it is fitted on ``data`` itself (Fields only).
    """
    if not clim.has_trend:
        if not isinstance(data, Field):
            raise ValueError("fit the trend on deterministic training data before applying to ensembles")
        clim = fit_trend(data, clim)
    days = _verifying_days(data)
    offset = clim.lookup_days(days) + clim.trend(days)
    if isinstance(data, Field):
        return data.with_values(data.values - offset[:, None])
    return data.with_values(data.values - offset[:, :, None, None])


def reseasonalize(data: Field | EnsembleField, clim: ClimatologyModel) -> Field | EnsembleField:
    """Inverse of :func:`deseasonalize_detrend` for a climatology with trend."""
    days = _verifying_days(data)
    offset = clim.lookup_days(days) + clim.trend(days)
    if isinstance(data, Field):
        return data.with_values(data.values + offset[:, None])
    return data.with_values(data.values + offset[:, :, None, None])


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma < SIGMA_FLOOR):
            raise ValueError("sigma below floor")


def fit_normalization(train: Field | np.ndarray, sigma_floor: float = SIGMA_FLOOR) -> NormStats:
    """Per-gridpoint mean and population std along time; sigma floored."""
    x = train.values if isinstance(train, Field) else np.asarray(train, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    # shifted by the first row so constant columns give mu exactly equal to the value
    x0 = x[0]
    d = x - x0
    mu = x0 + d.mean(axis=0)
    sigma = np.maximum(np.sqrt(((x - mu) ** 2).mean(axis=0)), sigma_floor)
    return NormStats(mu, sigma)


def _apply(data, fn):
    if isinstance(data, (Field, EnsembleField)):
        return data.with_values(fn(data.values))
    return fn(np.asarray(data, dtype=np.float64))


def normalize(data, stats: NormStats):
    if np.shape(data.values if hasattr(data, "values") else data)[-1] != stats.mu.size:
        raise DimensionError("normalization stats do not match the gridpoint count")
    return _apply(data, lambda v: (v - stats.mu) / stats.sigma)


def denormalize(data, stats: NormStats):
    if np.shape(data.values if hasattr(data, "values") else data)[-1] != stats.mu.size:
        raise DimensionError("normalization stats do not match the gridpoint count")
    return _apply(data, lambda v: v * stats.sigma + stats.mu)


def rolling_climatology(daily: Field, starts: Sequence[dt.date], years: int) -> np.ndarray:
    """Weekly means at the same calendar window in each of the ``years`` preceding years.

    Returns (len(starts), years, G): member k is the 7-day mean starting at
    ``start`` shifted back k + 1 years. Used as the reference forecast.
    """
    if years < 1:
        raise ValueError("years must be >= 1")
    shifted = [_years_before(d, k + 1) for d in starts for k in range(years)]
    uniq = sorted(set(shifted))
    wk = weekly_average(daily, uniq, 1).values[:, 0, 0, :]
    pos = {d: i for i, d in enumerate(uniq)}
    idx = np.array([pos[d] for d in shifted], dtype=np.int64)
    return wk[idx].reshape(len(starts), years, -1)
