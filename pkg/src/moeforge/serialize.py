"""Low-level binary/json persistence helpers shared by suites and checkpoints.

Tensor file layout: two little-endian u64 header words (rows, cols)
followed by rows*cols little-endian float64 values. JSON artifacts are
written canonically (sorted keys, fixed indent, trailing newline) so that
re-exporting unchanged state is byte-identical.
"""

from __future__ import annotations

import json
import struct
import sys
import zlib
from array import array
from pathlib import Path

from .errors import DataError
from .numerics import Matrix

_HEADER = struct.Struct("<QQ")


def _to_le_bytes(buf: array) -> bytes:
    if sys.byteorder == "little":
        return buf.tobytes()
    swapped = array("d", buf)
    swapped.byteswap()
    return swapped.tobytes()


def _from_le_bytes(raw: bytes) -> array:
    buf = array("d")
    buf.frombytes(raw)
    if sys.byteorder != "little":
        buf.byteswap()
    return buf


def tensor_payload(buf: array) -> bytes:
    """Raw little-endian float64 payload (no header)."""
    return _to_le_bytes(buf)


def payload_to_array(raw: bytes) -> array:
    if len(raw) % 8:
        raise DataError(f"tensor payload length {len(raw)} is not a multiple of 8")
    return _from_le_bytes(raw)


def write_tensor(path, rows: int, cols: int, buf: array) -> None:
    if len(buf) != rows * cols:
        raise DataError(f"tensor data length {len(buf)} != {rows}x{cols}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(_to_le_bytes(buf))


def read_tensor(path) -> tuple[int, int, array]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing tensor file {path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"tensor file {path} too short for its header")
    rows, cols = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise DataError(
            f"tensor file {path} has {len(body)} payload bytes, "
            f"expected {rows * cols * 8} for {rows}x{cols}"
        )
    return rows, cols, _from_le_bytes(body)


def write_matrix(path, m: Matrix) -> None:
    write_tensor(path, m.rows, m.cols, m.data)


def read_matrix(path) -> Matrix:
    rows, cols, data = read_tensor(path)
    return Matrix(rows, cols, data)


def dump_json(obj, path) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"missing manifest {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed json in {path}: {exc}") from None


def crc32(raw: bytes) -> int:
    return zlib.crc32(raw) & 0xFFFFFFFF
