"""Deterministic binary serialization helpers for checkpoints and tables.

All multi-byte integers are little-endian.  Tensor blobs are written in a
fixed name order so identical state always produces identical bytes, which
the fixed-seed reproducibility guarantees rely on.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import PayloadCorruptError

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _checked(value: int, bits: int) -> int:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"value {value} does not fit in u{bits}")
    return value


def write_u8(buf: io.BytesIO, value: int) -> None:
    buf.write(struct.pack("<B", _checked(value, 8)))


def write_u16(buf: io.BytesIO, value: int) -> None:
    buf.write(struct.pack("<H", _checked(value, 16)))


def write_u32(buf: io.BytesIO, value: int) -> None:
    buf.write(struct.pack("<I", _checked(value, 32)))


def read_u8(buf: io.BytesIO) -> int:
    return struct.unpack("<B", _take(buf, 1))[0]


def read_u16(buf: io.BytesIO) -> int:
    return struct.unpack("<H", _take(buf, 2))[0]


def read_u32(buf: io.BytesIO) -> int:
    return struct.unpack("<I", _take(buf, 4))[0]


def _take(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise PayloadCorruptError(
            f"unexpected end of data (wanted {n} bytes, got {len(data)})",
            offset=buf.tell(),
        )
    return data


def write_block(buf: io.BytesIO, data: bytes) -> None:
    """Length-prefixed byte block."""
    write_u32(buf, len(data))
    buf.write(data)


def read_block(buf: io.BytesIO) -> bytes:
    return _take(buf, read_u32(buf))


def write_json_block(buf: io.BytesIO, obj) -> None:
    write_block(buf, json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def read_json_block(buf: io.BytesIO):
    return json.loads(read_block(buf).decode("utf-8"))


def arrays_to_bytes(named: dict[str, np.ndarray]) -> bytes:
    """Serialize a name->array mapping; iteration follows the dict order."""
    buf = io.BytesIO()
    write_u32(buf, len(named))
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw_name = name.encode("utf-8")
        write_u16(buf, len(raw_name))
        buf.write(raw_name)
        write_u8(buf, _DTYPE_CODES[arr.dtype])
        write_u8(buf, arr.ndim)
        for dim in arr.shape:
            write_u32(buf, dim)
        # force little-endian byte order on disk
        write_block(buf, arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def bytes_to_arrays(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    count = read_u32(buf)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _take(buf, read_u16(buf)).decode("utf-8")
        code = read_u8(buf)
        if code not in _CODE_DTYPES:
            raise PayloadCorruptError(f"unknown dtype code {code}", offset=buf.tell())
        dtype = _CODE_DTYPES[code]
        ndim = read_u8(buf)
        shape = tuple(read_u32(buf) for _ in range(ndim))
        raw = read_block(buf)
        out[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return out


def state_dict_to_bytes(state_dict) -> bytes:
    """Serialize a torch state dict (sorted by name) to a deterministic blob."""
    named = {}
    for name in sorted(state_dict.keys()):
        tensor = state_dict[name]
        named[name] = tensor.detach().cpu().numpy()
    return arrays_to_bytes(named)


def bytes_to_state_dict(data: bytes):
    import torch

    return {name: torch.from_numpy(arr.copy()) for name, arr in bytes_to_arrays(data).items()}
