from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from s2sdown.grid import EnsembleField, Field, Grid

_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion, printed in the terminal summary."""

    def emit(criterion: str, ok: bool, detail: str) -> None:
        _REPORT.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_grid(n_lat=3, n_lon=4) -> Grid:
    return Grid(40.0, 2.0, n_lat, -5.0, 2.5, n_lon)


def daily_dates(start: dt.date, n: int) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range(n)]


def random_field(rng, n=20, grid=None, start=dt.date(2000, 1, 1), units="m/s") -> Field:
    grid = grid or small_grid()
    return Field(grid, daily_dates(start, n), rng.normal(size=(n, grid.size)), units)


def random_ensemble(rng, T=5, L=2, M=3, grid=None, start=dt.date(2000, 1, 6), units="m") -> EnsembleField:
    grid = grid or small_grid()
    inits = [start + dt.timedelta(days=7 * i) for i in range(T)]
    return EnsembleField(grid, inits, rng.normal(size=(T, L, M, grid.size)), units)
