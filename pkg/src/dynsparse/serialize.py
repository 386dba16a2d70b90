"""On-disk formats: binary tensors, debug CSV, and index-set encodings.

Binary tensor layout (little-endian throughout)::

    bytes 0-3   magic b"DTSR"
    byte  4     format version (1)
    byte  5     dtype code: 1=float64, 2=float32, 3=int32, 4=int64
    byte  6     number of dimensions (1..4)
    byte  7     reserved (0)
    next 8*ndim uint64 dimension sizes
    rest        row-major (C-order) element data

Index sets have two binary forms. The raw form is the in-memory layout the
dispatcher budgets for: per query, ``k`` fixed-width integers (int32 by
default). The compact form is varint-delta: per query a varint length,
then the first index and successive deltas as unsigned LEB128 varints.
"""

import io
import json

import numpy as np

MAGIC = b"DTSR"
VERSION = 1
_DTYPE_CODES = {
    np.dtype(np.float64): 1,
    np.dtype(np.float32): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.int64): 4,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, fixed separators, newline end."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"unsupported rank {arr.ndim}")
    head = bytearray()
    head += MAGIC
    head.append(VERSION)
    head.append(_DTYPE_CODES[arr.dtype])
    head.append(arr.ndim)
    head.append(0)
    for dim in arr.shape:
        head += int(dim).to_bytes(8, "little")
    return bytes(head) + arr.tobytes(order="C")


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != MAGIC:
        raise ValueError("bad tensor magic")
    if raw[4] != VERSION:
        raise ValueError(f"unsupported tensor format version {raw[4]}")
    dtype = _CODE_DTYPES.get(raw[5])
    if dtype is None:
        raise ValueError(f"unknown dtype code {raw[5]}")
    ndim = raw[6]
    dims = tuple(
        int.from_bytes(raw[8 + 8 * i : 16 + 8 * i], "little") for i in range(ndim)
    )
    offset = 8 + 8 * ndim
    data = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)
    return data.copy()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(np.asarray(arr)))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def save_tensor_csv(path, arr) -> None:
    """Debug CSV for 2D tensors; full float precision via repr format."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("CSV export only supports 2D tensors")
    np.savetxt(path, arr, delimiter=",", fmt="%r")


def load_tensor_csv(path, dtype=np.float64) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)


# --- index sets -----------------------------------------------------------


def raw_index_payload(indices, index_width: int = 4) -> bytes:
    """Fixed-width payload whose size the dispatcher's memory model predicts."""
    dtype = {4: np.int32, 8: np.int64}.get(index_width)
    if dtype is None:
        raise ValueError("index_width must be 4 or 8")
    out = io.BytesIO()
    for row in indices:
        out.write(np.ascontiguousarray(np.asarray(row, dtype=dtype)).tobytes())
    return out.getvalue()


def _write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varints are unsigned")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(raw: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        byte = raw[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def encode_index_sets(indices) -> bytes:
    """Varint-delta encoding of sorted per-query index lists."""
    out = bytearray()
    _write_varint(out, len(indices))
    for row in indices:
        row = np.asarray(row, dtype=np.int64)
        _write_varint(out, row.size)
        prev = 0
        for j, value in enumerate(row):
            delta = int(value) if j == 0 else int(value) - prev
            if delta < 0 or (j > 0 and delta == 0):
                raise ValueError("index rows must be strictly increasing")
            _write_varint(out, delta)
            prev = int(value)
    return bytes(out)


def decode_index_sets(raw: bytes) -> list:
    n_rows, pos = _read_varint(raw, 0)
    rows = []
    for _ in range(n_rows):
        count, pos = _read_varint(raw, pos)
        values = np.empty(count, dtype=np.int64)
        prev = 0
        for j in range(count):
            delta, pos = _read_varint(raw, pos)
            prev = delta if j == 0 else prev + delta
            values[j] = prev
        rows.append(values)
    return rows


def index_sets_debug_json(indices, theta=None) -> str:
    payload = {
        "theta": theta,
        "queries": [np.asarray(row, dtype=np.int64).tolist() for row in indices],
    }
    return canonical_json(payload)
