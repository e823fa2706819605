from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sdown.grid import (DimensionError, EnsembleField, Field, Grid, ensemble_mean, from_epoch_days,
                          latitude_weighted_mean, normalize_lon, to_epoch_days)

from conftest import random_ensemble, random_field, small_grid


def test_grid_coordinates_and_weights():
    g = Grid(-10.0, 5.0, 5, 170.0, 10.0, 4)
    assert g.shape == (5, 4) and g.size == 20
    np.testing.assert_allclose(g.lats, [-10, -5, 0, 5, 10])
    np.testing.assert_allclose(g.lons, [170, -180, -170, -160])
    np.testing.assert_allclose(g.lons_unwrapped, [170, 180, 190, 200])
    np.testing.assert_allclose(g.weights[:4], np.cos(np.deg2rad(-10)))
    lat, lon = g.point_coords()
    assert lat.shape == (20,) and lon[1] == -180.0


def test_pole_rows_get_zero_weight():
    g = Grid(80.0, 10.0, 2, 0.0, 1.0, 3)
    assert g.row_weights[1] == 0.0
    with pytest.raises(ValueError, match="weights sum to zero"):
        Grid(90.0, 1.0, 1, 0.0, 1.0, 2)


@pytest.mark.parametrize("args, msg", [
    ((0, 1, 0, 0, 1, 1), "n_lat"),
    ((0, -1, 2, 0, 1, 1), "strictly positive"),
    ((85, 2, 4, 0, 1, 1), "leave"),
    ((0, 1, 2, 0, 90, 5), "wraps"),
    ((float("nan"), 1, 2, 0, 1, 1), "not finite"),
])
def test_invalid_grids(args, msg):
    with pytest.raises(ValueError, match=msg):
        Grid(*args)


def test_subgrid_and_lon_normalization():
    g = Grid(40, 2, 8, -10, 2, 12)
    s = g.subgrid(2, 3, 4, 6)
    assert s == Grid(44, 2, 4, -4, 2, 6)
    assert Grid(0, 1, 1, 370, 1, 1).lon_start == 10.0
    assert normalize_lon(180.0) == -180.0


@given(st.lists(st.integers(-50000, 50000), min_size=1, max_size=20, unique=True))
def test_epoch_day_round_trip(days):
    days = sorted(days)
    assert np.array_equal(to_epoch_days(from_epoch_days(days)), days)


def test_field_validation(rng):
    g = small_grid()
    f = random_field(rng, 5, g)
    assert f.n_times == 5 and f.as_maps().shape == (5, 3, 4)
    with pytest.raises(DimensionError):
        Field(g, f.times, np.zeros((5, 3)))
    with pytest.raises(ValueError, match="increasing"):
        Field(g, [f.times[1], f.times[0]], np.zeros((2, 12)))
    sub = f.select([0, 2])
    assert sub.times == (f.times[0], f.times[2])
    assert np.shares_memory(sub.values, f.values) is False


def test_ensemble_validation(rng):
    e = random_ensemble(rng)
    assert (e.n_inits, e.n_lead, e.n_members) == (5, 2, 3)
    with pytest.raises(DimensionError, match="4-d"):
        EnsembleField(e.grid, e.inits, np.zeros((5, 2, 12)))
    with pytest.raises(DimensionError, match="single-member"):
        e.deterministic()
    assert ensemble_mean(e).shape == (5, 2, 12)
    m = e.select(np.array([True, False, True, False, False]))
    assert m.n_inits == 2


def test_latitude_weighted_mean_matches_weights():
    g = Grid(0, 30, 3, 0, 10, 2)
    v = np.array([1.0, 1.0, 2.0, 2.0, 3.0, 3.0])
    w = np.cos(np.deg2rad([0, 30, 60]))
    assert latitude_weighted_mean(v, g) == pytest.approx((w * [1, 2, 3]).sum() / w.sum())


@settings(max_examples=30)
@given(st.floats(-5, 5), st.integers(1, 4))
def test_weighted_mean_of_constant_is_constant(c, n_lat):
    g = Grid(-30, 15, n_lat, 0, 5, 3)
    assert latitude_weighted_mean(np.full(g.size, c), g) == pytest.approx(c)


def test_dates_must_be_dates(rng):
    with pytest.raises((TypeError, ValueError)):
        Field(small_grid(), ["2000-01-01"], np.zeros((1, 12)))
    assert Field(small_grid(), [dt.date(2000, 1, 1)], np.zeros((1, 12))).n_times == 1
