"""CSV ingest for externally prepared fields and CSV output of score tables."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from ..grid import Field, Grid, normalize_lon
from .gfd import atomic_write_bytes

SCORE_COLUMNS = ["score_name", "lead", "lat", "lon", "value", "p_value", "sig_class"]
AGGREGATE = "SPATIAL_MEAN"
_COORD_TOL = 1e-6


class CsvImportError(ValueError):
    pass


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise CsvImportError(f"line {line}: unparseable date {text!r}") from None


def import_csv_field(path, grid: Grid, units: str = "") -> Field:
    """Read ``date,lat,lon,value`` rows into a Field on ``grid``.

    Every date must cover every gridpoint exactly once; row order is irrelevant.
    """
    lats = grid.lats
    lons = grid.lons
    cells: dict[dt.date, dict[int, float]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing_cols = {"date", "lat", "lon", "value"} - set(reader.fieldnames or ())
        if missing_cols:
            raise CsvImportError(f"missing columns: {sorted(missing_cols)}")
        for line, row in enumerate(reader, start=2):
            date = _parse_date(row["date"], line)
            try:
                lat, lon, value = float(row["lat"]), float(row["lon"]), float(row["value"])
            except (TypeError, ValueError):
                raise CsvImportError(f"line {line}: non-numeric lat/lon/value") from None
            if not math.isfinite(value):
                raise CsvImportError(f"line {line}: non-finite value")
            i = np.flatnonzero(np.abs(lats - lat) < _COORD_TOL)
            dlon = np.abs(normalize_lon(lons - lon))
            j = np.flatnonzero(dlon < _COORD_TOL)
            if i.size != 1 or j.size != 1:
                raise CsvImportError(f"line {line}: ({lat}, {lon}) is not a point of the grid")
            g = int(i[0]) * grid.n_lon + int(j[0])
            per_date = cells.setdefault(date, {})
            if g in per_date:
                raise CsvImportError(f"line {line}: duplicate cell ({lat}, {lon}) on {date}")
            per_date[g] = value

    times = sorted(cells)
    values = np.empty((len(times), grid.size))
    glat, glon = grid.point_coords()
    for t, date in enumerate(times):
        per_date = cells[date]
        if len(per_date) != grid.size:
            g = next(k for k in range(grid.size) if k not in per_date)
            raise CsvImportError(f"{date}: missing cell (lat={glat[g]:g}, lon={glon[g]:g})")
        values[t] = [per_date[g] for g in range(grid.size)]
    return Field(grid, times, values, units)


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x)


def score_table_rows(tables) -> list[list[str]]:
    from ..significance import classify_p

    rows = []
    for tab in tables:
        glat, glon = tab.grid.point_coords()
        agg = tab.aggregate()
        for li, lead in enumerate(tab.leads):
            for g in range(tab.grid.size):
                p = None if tab.p_value is None else tab.p_value[li, g]
                rows.append([tab.name, str(lead), repr(float(glat[g])), repr(float(glon[g])),
                             _fmt(tab.values[li, g]), _fmt(p), classify_p(p)])
            p = None if tab.aggregate_p_value is None else tab.aggregate_p_value[li]
            rows.append([tab.name, str(lead), AGGREGATE, AGGREGATE, _fmt(agg[li]), _fmt(p), classify_p(p)])
    return rows


def write_score_table(path, tables) -> None:
    """Write one or more ScoreTables: one row per (lead, cell) plus one aggregate row per lead."""
    if not isinstance(tables, Iterable) or hasattr(tables, "values"):
        tables = [tables]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    w.writerows(score_table_rows(tables))
    atomic_write_bytes(Path(path), buf.getvalue().encode("utf-8"))


def read_score_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
