"""GFD1 binary container for Field and EnsembleField.

Layout (all little-endian), see FORMAT.md::

    0   4s   magic "GFD1"
    4   u8   kind (0 Field, 1 EnsembleField)
    5   4u32 T, L, M, G
    21  6f64 lat_start, lat_step, lat_end, lon_start, lon_step, lon_end
    69  2u32 n_lat, n_lon
    77  u32  units byte length n, then n bytes UTF-8
    ..  T*i32 epoch days
    ..  T*L*M*G f64 payload, axis order (t, l, m, g)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..grid import EnsembleField, Field, Grid, from_epoch_days, to_epoch_days

MAGIC = b"GFD1"
KIND_FIELD = 0
KIND_ENSEMBLE = 1
MAX_UNITS_BYTES = 4096

_HEAD = struct.Struct("<4sB4I6d2I")


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_gfd(obj: Field | EnsembleField) -> bytes:
    if isinstance(obj, EnsembleField):
        kind, values, times = KIND_ENSEMBLE, obj.values, obj.inits
    elif isinstance(obj, Field):
        kind, values, times = KIND_FIELD, obj.values[:, None, None, :], obj.times
    else:
        raise TypeError(f"cannot encode {type(obj).__name__} as GFD")
    T, L, M, G = values.shape
    g = obj.grid
    units = obj.units.encode("utf-8")
    if len(units) > MAX_UNITS_BYTES:
        raise ValueError("units string too long")
    lat_end = g.lat_start + (g.n_lat - 1) * g.lat_step
    lon_end = g.lon_start + (g.n_lon - 1) * g.lon_step
    head = _HEAD.pack(MAGIC, kind, T, L, M, G,
                      g.lat_start, g.lat_step, lat_end, g.lon_start, g.lon_step, lon_end,
                      g.n_lat, g.n_lon)
    parts = [head, struct.pack("<I", len(units)), units,
             to_epoch_days(times).astype("<i4").tobytes(),
             np.ascontiguousarray(values, dtype="<f8").tobytes()]
    return b"".join(parts)


def write_gfd(path, obj: Field | EnsembleField) -> None:
    atomic_write_bytes(path, encode_gfd(obj))


def decode_gfd(buf: bytes) -> Field | EnsembleField:
    n = len(buf)
    if n < _HEAD.size:
        raise FormatError(f"header truncated: {n} of {_HEAD.size} bytes", n)
    (magic, kind, T, L, M, G, lat0, dlat, lat1, lon0, dlon, lon1,
     n_lat, n_lon) = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if kind not in (KIND_FIELD, KIND_ENSEMBLE):
        raise FormatError(f"unknown kind code {kind}", 4)
    if kind == KIND_FIELD and (L != 1 or M != 1):
        raise FormatError(f"Field must have L = M = 1, got L={L} M={M}", 5)
    if L < 1 or M < 1 or G < 1:
        raise FormatError(f"degenerate dims T={T} L={L} M={M} G={G}", 5)
    if n_lat * n_lon != G:
        raise FormatError(f"grid {n_lat}x{n_lon} disagrees with G={G}", 69)
    try:
        grid = Grid(lat0, dlat, n_lat, lon0, dlon, n_lon)
    except ValueError as exc:
        raise FormatError(f"invalid grid: {exc}", 21) from None
    for got, want, off in ((lat1, lat0 + (n_lat - 1) * dlat, 37), (lon1, lon0 + (n_lon - 1) * dlon, 61)):
        if not np.isclose(got, want, rtol=0, atol=1e-9):
            raise FormatError("grid end coordinate inconsistent with start/step", off)

    pos = _HEAD.size
    if n < pos + 4:
        raise FormatError("units length truncated", pos)
    (n_units,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if n_units > MAX_UNITS_BYTES:
        raise FormatError(f"units length {n_units} exceeds {MAX_UNITS_BYTES}", pos - 4)
    if n < pos + n_units:
        raise FormatError("units string truncated", pos)
    try:
        units = bytes(buf[pos:pos + n_units]).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("units string is not valid UTF-8", pos) from None
    pos += n_units

    # sizes computed in Python ints, so no overflow before the length checks
    n_time_bytes = 4 * T
    n_payload = 8 * T * L * M * G
    if n - pos < n_time_bytes:
        raise FormatError(f"timestamps truncated: need {n_time_bytes} bytes, have {n - pos}", pos)
    days = np.frombuffer(buf, dtype="<i4", count=T, offset=pos).astype(np.int64)
    pos += n_time_bytes
    if np.any(np.diff(days) <= 0):
        raise FormatError("timestamps not strictly increasing", pos - n_time_bytes)
    if n - pos != n_payload:
        raise FormatError(f"payload length {n - pos} bytes, header declares {n_payload}", pos)
    values = np.frombuffer(buf, dtype="<f8", count=T * L * M * G, offset=pos).astype(np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError("payload contains NaN or Inf", pos + 8 * bad)
    try:
        times = from_epoch_days(days)
    except OverflowError:
        raise FormatError("timestamp out of calendar range", pos - n_time_bytes) from None
    values = values.reshape(T, L, M, G)
    if kind == KIND_FIELD:
        return Field(grid, times, values[:, 0, 0, :], units)
    return EnsembleField(grid, times, values, units)


def read_gfd(path) -> Field | EnsembleField:
    return decode_gfd(Path(path).read_bytes())


def read_field(path) -> Field:
    obj = read_gfd(path)
    if not isinstance(obj, Field):
        raise FormatError(f"{path} holds an EnsembleField, expected a Field", 4)
    return obj


def read_ensemble(path) -> EnsembleField:
    obj = read_gfd(path)
    if isinstance(obj, Field):
        raise FormatError(f"{path} holds a Field, expected an EnsembleField", 4)
    return obj
