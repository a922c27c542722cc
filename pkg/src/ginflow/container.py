"""Binary container used for dataset files and model checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes
    hlen      uint64, length of the JSON header
    header    UTF-8 JSON, keys sorted, compact separators
    payload   concatenated little-endian arrays, in header["arrays"] order
    crc32     uint32 over everything above

The header lists every array as ``{"name", "dtype", "shape"}``; dtypes are
restricted to ``<f8`` and ``<i8``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CorruptFileError(ValueError):
    """File is truncated, malformed, or fails its checksum."""


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    index = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        index.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        blobs.append(data.tobytes(order="C"))
    head = dump_header({**header, "arrays": index})
    body = magic + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(raw: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 8 + 8 + 4:
        raise CorruptFileError("file too short")
    if raw[:8] != magic:
        raise CorruptFileError(f"bad magic {raw[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen + 4 > len(raw):
        raise CorruptFileError("truncated header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise CorruptFileError("corrupt header: missing array index")

    arrays = {}
    offset = 16 + hlen
    for entry in header["arrays"]:
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            name = entry["name"]
        except (KeyError, TypeError, ValueError):
            raise CorruptFileError(f"corrupt array entry {entry!r}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(body):
            raise CorruptFileError(f"truncated payload in array {name!r}")
        arrays[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise CorruptFileError("payload length does not match header")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFileError("checksum mismatch")
    del header["arrays"]
    return header, arrays


def write(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(magic, header, arrays))
    return path


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return from_bytes(Path(path).read_bytes(), magic)
