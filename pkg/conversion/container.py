"""
Named-array container.

Layout::

    b"MTCR" | uint32 LE header length | JSON header | payload

The header lists ``{name, element_type, shape, byte_offset}`` per entry plus a
free-form ``attrs`` mapping. Payload offsets are relative to the start of the
payload; every entry is stored contiguous, row-major, little-endian.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import CorruptContainer, DuplicateName

MAGIC = b"MTCR"
ELEMENT_TYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_LENGTH = struct.Struct("<I")


def _element_type(array: np.ndarray) -> str:
    return "f8" if array.dtype == np.float64 else "f4"


def encode_container(named_arrays, attrs: dict | None = None) -> bytes:
    items = list(named_arrays.items()) if isinstance(named_arrays, dict) else list(named_arrays)
    seen = set()
    entries, chunks, offset = [], [], 0
    for name, array in items:
        if not name:
            raise DuplicateName("array names must be non-empty")
        if name in seen:
            raise DuplicateName(f"array name {name!r} appears twice")
        seen.add(name)
        array = np.asarray(array)
        kind = _element_type(array)
        data = np.ascontiguousarray(array, dtype=ELEMENT_TYPES[kind]).tobytes()
        entries.append({
            "name": name,
            "element_type": kind,
            "shape": list(array.shape),
            "byte_offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"entries": entries, "attrs": attrs or {}}).encode()
    return MAGIC + _LENGTH.pack(len(header)) + header + b"".join(chunks)


def decode_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    prefix = len(MAGIC) + _LENGTH.size
    if len(blob) < prefix or blob[:len(MAGIC)] != MAGIC:
        raise CorruptContainer("missing MTCR magic")
    (header_length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    if len(blob) < prefix + header_length:
        raise CorruptContainer("header truncated")
    try:
        header = json.loads(blob[prefix:prefix + header_length])
        entries = header["entries"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptContainer(f"unreadable header: {exc}") from exc

    payload = memoryview(blob)[prefix + header_length:]
    arrays, expected_offset = {}, 0
    for entry in entries:
        try:
            name, kind = entry["name"], entry["element_type"]
            shape, offset = tuple(entry["shape"]), entry["byte_offset"]
            dtype = ELEMENT_TYPES[kind]
        except KeyError as exc:
            raise CorruptContainer(f"bad entry {entry!r}") from exc
        if name in arrays:
            raise DuplicateName(f"array name {name!r} appears twice")
        if offset != expected_offset:
            raise CorruptContainer(
                f"entry {name!r} at offset {offset}, expected {expected_offset}"
            )
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + size > len(payload):
            raise CorruptContainer(f"payload truncated inside entry {name!r}")
        arrays[name] = np.frombuffer(
            payload[offset:offset + size], dtype=dtype
        ).reshape(shape).copy()
        expected_offset = offset + size
    if expected_offset != len(payload):
        raise CorruptContainer(
            f"payload holds {len(payload)} bytes, entries cover {expected_offset}"
        )
    return arrays, header.get("attrs", {})


def write_container(path, named_arrays, attrs: dict | None = None) -> Path:
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(named_arrays, attrs))
    os.replace(tmp, path)
    return path


def read_container(path, with_attrs: bool = False):
    arrays, attrs = decode_container(Path(path).read_bytes())
    return (arrays, attrs) if with_attrs else arrays
