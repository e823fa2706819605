"""Checkpoint container: a short header followed by named, typed parameter blocks.

::

    0  4s  magic "GFC1"
    4  u32 number of blocks
    then per block:
       u16 name length, name (UTF-8)
       u8  dtype code (0 f64, 1 i64, 2 UTF-8 text)
       u8  ndim, then ndim x u32 shape
       u64 payload byte length, payload

Text blocks carry JSON metadata (model kind, hyperparameters, grids).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .gfd import FormatError, atomic_write_bytes

MAGIC = b"GFC1"
_DTYPES = {0: "<f8", 1: "<i8"}
TEXT = 2


def encode_blocks(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    blocks = []
    items = list(arrays.items())
    if meta is not None:
        items.insert(0, ("__meta__", json.dumps(meta, sort_keys=True)))
    for name, arr in items:
        nb = name.encode("utf-8")
        if isinstance(arr, str):
            payload = arr.encode("utf-8")
            head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", TEXT, 1) + struct.pack("<I", len(payload))
        else:
            arr = np.asarray(arr)
            code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
            data = np.array(arr, dtype=_DTYPES[code], order="C")  # keeps 0-d shape
            payload = data.tobytes()
            head = (struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, data.ndim)
                    + struct.pack(f"<{data.ndim}I", *data.shape))
        blocks.append(head + struct.pack("<Q", len(payload)) + payload)
    return MAGIC + struct.pack("<I", len(blocks)) + b"".join(blocks)


def decode_blocks(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    n = len(buf)
    if n < 8:
        raise FormatError("checkpoint header truncated", n)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    (n_blocks,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}

    def need(k):
        if n - pos < k:
            raise FormatError(f"block truncated: need {k} bytes, have {n - pos}", pos)

    for _ in range(n_blocks):
        need(2)
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(ln + 2)
        try:
            name = bytes(buf[pos:pos + ln]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("block name is not UTF-8", pos) from None
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in (0, 1, TEXT):
            raise FormatError(f"unknown dtype code {code}", pos - 2)
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        need(8)
        (nbytes,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        need(nbytes)
        raw = bytes(buf[pos:pos + nbytes])
        if code == TEXT:
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("text block is not UTF-8", pos) from None
            if name == "__meta__":
                try:
                    meta = json.loads(text)
                except json.JSONDecodeError:
                    raise FormatError("metadata block is not JSON", pos) from None
            else:
                arrays[name] = text
        else:
            count = int(np.prod(shape, dtype=object)) if ndim else 1
            if 8 * count != nbytes:
                raise FormatError(f"block {name!r} declares shape {shape} but has {nbytes} bytes", pos)
            arrays[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
        pos += nbytes
    if pos != n:
        raise FormatError(f"{n - pos} trailing bytes after last block", pos)
    return arrays, meta


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_blocks(arrays, meta))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_blocks(Path(path).read_bytes())
