"""Binary tensor store.

Layout::

    b"STMX" | version: u32 LE | header length: u32 LE | header (UTF-8) | payload

The header is line-oriented text. ``meta <key> <value>`` lines carry
metadata, ``config <line>`` lines carry the model config verbatim, and
``tensor <name> <shape> <offset> <nbytes>`` lines form the tensor table.
Shapes are ``x``-joined dims (``scalar`` for 0-d). The payload is the
float32 little-endian values of every tensor, in table order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"STMX"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class WeightFormatError(ValueError):
    """Base class for malformed weight files."""


class MagicError(WeightFormatError):
    pass


class VersionError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


class HeaderError(WeightFormatError):
    pass


class ShapeTableError(WeightFormatError):
    pass


def _shape_text(shape):
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text):
    if text == "scalar":
        return ()
    try:
        dims = tuple(int(d) for d in text.split("x"))
    except ValueError:
        raise ShapeTableError(f"bad shape field {text!r}") from None
    if any(d < 0 for d in dims):
        raise ShapeTableError(f"negative dimension in {text!r}")
    return dims


def pack(tensors: dict, meta: dict | None = None, config_text: str = "") -> bytes:
    """Serialize named float32 tensors plus metadata into store bytes."""
    lines = [f"meta {k} {v}" for k, v in (meta or {}).items()]
    lines += [f"config {line}" for line in config_text.splitlines()]
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        lines.append(f"tensor {name} {_shape_text(np.shape(arr))} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def unpack(data: bytes) -> tuple[dict, dict, str]:
    """Parse store bytes into ``(tensors, meta, config_text)``."""
    if len(data) < _PREFIX.size or data[:4] != MAGIC:
        raise MagicError("not an STMX file (bad magic)")
    _, version, header_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported STMX version {version} (expected {VERSION})")
    start = _PREFIX.size
    if start + header_len > len(data):
        raise TruncatedPayloadError("file ends inside the header")
    try:
        header = data[start:start + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"header is not valid UTF-8: {exc}") from None
    payload = memoryview(data)[start + header_len:]

    meta, config_lines, table = {}, [], []
    for lineno, line in enumerate(header.splitlines(), 1):
        if not line:
            continue
        tag, _, rest = line.partition(" ")
        if tag == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif tag == "config":
            config_lines.append(rest)
        elif tag == "tensor":
            fields = rest.split(" ")
            if len(fields) != 4:
                raise ShapeTableError(f"header line {lineno}: expected 'tensor name shape offset nbytes'")
            name, shape, off, nbytes = fields
            try:
                off, nbytes = int(off), int(nbytes)
            except ValueError:
                raise ShapeTableError(f"header line {lineno}: non-integer offset/size") from None
            table.append((name, _parse_shape(shape), off, nbytes))
        else:
            raise HeaderError(f"header line {lineno}: unknown record {tag!r}")

    tensors = {}
    expected = 0
    for name, shape, off, nbytes in table:
        if name in tensors:
            raise ShapeTableError(f"duplicate tensor {name!r}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ShapeTableError(f"tensor {name!r}: {nbytes} bytes cannot hold shape {shape}")
        if off != expected:
            raise ShapeTableError(f"tensor {name!r}: offset {off}, expected {expected}")
        if off + nbytes > len(payload):
            raise TruncatedPayloadError(f"payload truncated inside tensor {name!r}")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
        expected = off + nbytes
    if expected != len(payload):
        raise ShapeTableError(f"{len(payload) - expected} trailing payload bytes not described by the table")
    return tensors, meta, "\n".join(config_lines)


def is_store(data: bytes) -> bool:
    return data[:4] == MAGIC
