"""Self-describing binary container shared by dataset records and checkpoints.

Layout (integers little-endian)::

    magic          6 bytes, identifies the file family
    version        u16
    header length  u32
    header         UTF-8 JSON, keys sorted: {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    body           raw little-endian arrays at the listed offsets

Encoding is canonical (sorted keys, sorted array names), so equal content
always produces equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_PREFIX = struct.Struct("<6sHI")


class ContainerError(Exception):
    """Base class; carries the offending path."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


class CorruptHeaderError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def encode(magic: bytes, version: int, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": table}, sort_keys=True).encode()
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(blobs)


def decode(data: bytes, magic: bytes, version: int, path="<memory>") -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise TruncatedError(path, "file shorter than the fixed prefix")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise CorruptHeaderError(path, f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionMismatchError(path, f"format version {got_version}, this build reads {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise TruncatedError(path, "header extends past end of file")
    try:
        header = json.loads(data[start:start + hlen].decode())
        entries = header["arrays"]
        kind, meta = header["kind"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(path, f"unreadable header ({exc})") from None
    body = start + hlen
    expected = body + sum(e["nbytes"] for e in entries)
    if len(data) < expected:
        raise TruncatedError(path, f"body has {len(data) - body} bytes, header lists {expected - body}")
    if len(data) > expected:
        raise CorruptHeaderError(path, "trailing bytes after the last array")
    arrays = {}
    for e in entries:
        lo = body + e["offset"]
        arr = np.frombuffer(data[lo:lo + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return kind, meta, arrays


def write(path, magic: bytes, version: int, kind: str, meta: dict, arrays: dict) -> bytes:
    path = Path(path)
    data = encode(magic, version, kind, meta, arrays)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise ContainerError(path, f"cannot write ({exc.strerror})") from None
    return data


def read(path, magic: bytes, version: int) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(path, f"cannot read ({exc.strerror})") from None
    return decode(data, magic, version, path)
