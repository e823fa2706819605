from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sdown.grid import EnsembleField, Field, Grid, latitude_weighted_mean
from s2sdown.preprocess import (DomainError, MissingDataError, calendar_key, denormalize,
                                deseasonalize_detrend, fit_climatology, fit_normalization, fit_trend,
                                lead_dates, normalize, regrid_bilinear, reseasonalize, rolling_climatology,
                                weekly_average, weekly_series)

from conftest import daily_dates, random_ensemble, random_field, small_grid


def _linear_field(grid: Grid, a, b, c) -> np.ndarray:
    lat, lon = grid.point_coords()
    return a + b * lat + c * np.where(lon < grid.lon_start - 1e-9, lon + 360, lon)


def test_regrid_reproduces_bilinear_functions():
    src = Grid(40, 2, 6, -10, 2, 8)
    dst = Grid(41.0, 1.5, 5, -9.0, 1.7, 6)
    f = Field(src, [dt.date(2000, 1, 1)], _linear_field(src, 3.0, 0.5, -0.2)[None])
    out = regrid_bilinear(f, dst)
    np.testing.assert_allclose(out.values[0], _linear_field(dst, 3.0, 0.5, -0.2), atol=1e-12)


def test_regrid_identity_and_ensemble(rng):
    e = random_ensemble(rng)
    same = regrid_bilinear(e, e.grid)
    np.testing.assert_allclose(same.values, e.values, atol=1e-13)
    assert same.metadata == e.metadata


def test_regrid_across_dateline():
    src = Grid(0, 1, 2, 170, 5, 5)         # 170 .. 190
    dst = Grid(0, 1, 2, -178, 2, 3)        # 182, 184, 186
    lon = src.lons_unwrapped
    v = np.tile(lon, 2)[None]
    out = regrid_bilinear(Field(src, [dt.date(2000, 1, 1)], v), dst)
    np.testing.assert_allclose(out.values[0], np.tile([182, 184, 186], 2))


def test_regrid_refuses_extrapolation():
    src = Grid(40, 2, 3, 0, 2, 3)
    with pytest.raises(DomainError, match="latitude"):
        regrid_bilinear(Field(src, [dt.date(2000, 1, 1)], np.zeros((1, 9))), Grid(39, 1, 2, 0, 1, 2))


def test_weekly_average_windows():
    g = small_grid(1, 1)
    days = daily_dates(dt.date(2000, 1, 1), 30)
    f = Field(g, days, np.arange(30.0)[:, None])
    wk = weekly_average(f, [days[0], days[3]], n_leads=2)
    np.testing.assert_allclose(wk.values[:, :, 0, 0], [[3, 10], [6, 13]])
    np.testing.assert_array_equal(lead_dates([days[0]], 3)[0] - lead_dates([days[0]], 3)[0, 0], [0, 7, 14])
    s = weekly_series(f, [days[1]])
    assert s.values[0, 0] == 4.0
    with pytest.raises(MissingDataError, match="2000-01-31"):
        weekly_average(f, [days[20]], n_leads=2)


def test_calendar_key_folds_leap_day():
    assert calendar_key([dt.date(2000, 2, 29), dt.date(2001, 2, 28), dt.date(2001, 12, 5)]).tolist() == [228, 228, 1205]


def _seasonal_field(years=4, start=dt.date(1990, 1, 1)):
    g = Grid(40, 10, 3, 0, 10, 2)
    days = daily_dates(start, 365 * years + 1)
    doy = np.array([d.timetuple().tm_yday for d in days])
    base = 5 + np.cos(2 * np.pi * doy / 365.25)
    return Field(g, days, base[:, None] + np.linspace(-1, 1, g.size)[None, :]), base


def test_climatology_is_spatial_mean_per_calendar_date():
    f, base = _seasonal_field()
    clim = fit_climatology(f, 2, before=dt.date(1993, 1, 1))
    sel = [i for i, d in enumerate(f.times) if dt.date(1991, 1, 1) <= d < dt.date(1993, 1, 1)]
    want = latitude_weighted_mean(f.values[sel[0]], f.grid)
    lookup = clim.lookup([f.times[sel[0]]])[0]
    assert lookup == pytest.approx((want + latitude_weighted_mean(f.values[sel[0] + 365], f.grid)) / 2)
    with pytest.raises(MissingDataError, match="insufficient history"):
        fit_climatology(f, 5, before=dt.date(1993, 1, 1))


def test_anomalies_remove_trend_and_round_trip():
    f, base = _seasonal_field()
    trend = 0.001 * np.arange(f.n_times)
    g = f.with_values(f.values + trend[:, None])
    clim = fit_trend(g, fit_climatology(g, 1, before=dt.date(1991, 1, 1)))
    a = deseasonalize_detrend(g, clim)
    assert abs(np.polyfit(np.arange(a.n_times), latitude_weighted_mean(a.values, a.grid), 1)[0]) < 1e-4
    np.testing.assert_allclose(reseasonalize(a, clim).values, g.values, atol=1e-12)


def test_ensemble_anomalies_use_verifying_dates():
    f, _ = _seasonal_field()
    clim = fit_trend(f, fit_climatology(f, 1, before=dt.date(1991, 1, 1)))
    inits = [dt.date(1992, 3, 2), dt.date(1992, 3, 9)]
    wk = weekly_average(f, inits, 2)
    ens = EnsembleField(f.grid, inits, np.repeat(wk.values, 3, axis=2))
    a = deseasonalize_detrend(ens, clim)
    lead2 = clim.lookup([dt.date(1992, 3, 9)])[0] + clim.trend(np.array([(dt.date(1992, 3, 9) - dt.date(1970, 1, 1)).days]))[0]
    np.testing.assert_allclose(a.values[0, 1], ens.values[0, 1] - lead2)
    with pytest.raises(ValueError, match="fit the trend"):
        deseasonalize_detrend(ens, fit_climatology(f, 1, before=dt.date(1991, 1, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 6), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 10 ** 6))
def test_normalization_round_trip(T, G, loc, scale, seed):
    x = np.random.default_rng(seed).normal(loc, scale, size=(T, G))
    s = fit_normalization(x)
    z = normalize(x, s)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(denormalize(z, s), x, rtol=1e-10, atol=1e-9 * scale)


def test_normalization_floors_constant_columns():
    x = np.column_stack([np.full(5, 3.7), np.arange(5.0)])
    s = fit_normalization(x)
    assert s.mu[0] == 3.7 and s.sigma[0] == 1e-8
    np.testing.assert_array_equal(normalize(x, s)[:, 0], 0.0)


def test_rolling_climatology_members_are_past_years():
    g = small_grid(1, 1)
    days = daily_dates(dt.date(1990, 1, 1), 365 * 4 + 30)
    f = Field(g, days, np.arange(len(days), dtype=float)[:, None])
    rc = rolling_climatology(f, [dt.date(1993, 1, 10)], 3)
    idx = [days.index(dt.date(y, 1, 10)) for y in (1992, 1991, 1990)]
    np.testing.assert_allclose(rc[0, :, 0], [i + 3 for i in idx])
