"""Text manifest followed by a little-endian binary blob, in a single file.

Layout::

    GREEN <kind> <version>
    meta <key> <json value>                    (zero or more)
    tensor <name> <f8|i8> <shape> <offset> <nbytes>   (zero or more)
    end <blob nbytes>
    <blob>

``shape`` is ``x``-joined dimensions, or ``-`` for a 0-d value. Offsets are
relative to the first blob byte and tensors are packed back to back in
manifest order. JSON values are written compactly with floats in shortest
round-trip form, so encode(decode(b)) == b.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}
MAX_HEADER = 1 << 24


def _shape_text(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str, offset: int) -> tuple:
    if text == "-":
        return ()
    try:
        shape = tuple(int(s) for s in text.split("x"))
    except ValueError:
        raise FormatError(f"bad shape {text!r}", offset) from None
    if any(s < 0 for s in shape):
        raise FormatError(f"negative dimension in shape {text!r}", offset)
    return shape


def encode(kind: str, meta: dict, arrays: dict) -> bytes:
    lines = [f"GREEN {kind} {VERSION}"]
    for key, value in meta.items():
        if not key or any(c.isspace() for c in key):
            raise FormatError(f"meta key {key!r} must be non-empty without whitespace")
        lines.append(f"meta {key} {json.dumps(value, separators=(',', ':'), allow_nan=False)}")
    chunks, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        lines.append(f"tensor {name} {code} {_shape_text(arr.shape)} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(f"end {offset}")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks)


def decode(blob: bytes, kind: str):
    """Return ``(meta, arrays)``; every inconsistency raises :class:`FormatError`."""
    end = blob.find(b"\nend ", 0, MAX_HEADER)
    stop = blob.find(b"\n", end + 1) if end >= 0 else -1
    if end < 0 or stop < 0:
        raise FormatError("manifest terminator not found; file truncated or not a GREEN file", len(blob))
    try:
        header = blob[:stop].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not ASCII", exc.start) from None
    data_start = stop + 1

    first = header[0].split(" ")
    if len(first) != 3 or first[0] != "GREEN":
        raise FormatError("missing GREEN magic", 0)
    if first[1] != kind:
        raise FormatError(f"expected a {kind!r} file, found {first[1]!r}", 0)
    try:
        version = int(first[2])
    except ValueError:
        raise FormatError(f"bad version field {first[2]!r}", 0) from None
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (supported: {VERSION})")

    meta, layout = {}, []
    pos = len(header[0]) + 1
    for line in header[1:-1]:
        tag, _, rest = line.partition(" ")
        if tag == "meta":
            key, _, value = rest.partition(" ")
            try:
                meta[key] = json.loads(value)
            except json.JSONDecodeError:
                raise FormatError(f"bad JSON for meta key {key!r}", pos) from None
        elif tag == "tensor":
            parts = rest.split(" ")
            if len(parts) != 5 or parts[1] not in _DTYPES:
                raise FormatError(f"malformed tensor entry {line!r}", pos)
            name, code, shape_text, off, nbytes = parts
            try:
                off, nbytes = int(off), int(nbytes)
            except ValueError:
                raise FormatError(f"malformed tensor entry {line!r}", pos) from None
            layout.append((name, code, _parse_shape(shape_text, pos), off, nbytes, pos))
        else:
            raise FormatError(f"unknown manifest record {tag!r}", pos)
        pos += len(line) + 1
    try:
        declared = int(header[-1].split(" ", 1)[1])
    except (IndexError, ValueError):
        raise FormatError("bad end record", pos) from None

    payload = blob[data_start:]
    if len(payload) != declared:
        raise FormatError(f"blob holds {len(payload)} bytes, manifest declares {declared}",
                          data_start + min(len(payload), declared))
    arrays, expect = {}, 0
    for name, code, shape, off, nbytes, line_pos in layout:
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"tensor {name!r}: shape {shape} needs "
                              f"{int(np.prod(shape)) * dtype.itemsize} bytes, manifest says {nbytes}", line_pos)
        if off != expect:
            raise FormatError(f"tensor {name!r}: offset {off} breaks packing (expected {expect})", line_pos)
        if off + nbytes > declared:
            raise FormatError(f"tensor {name!r} runs past end of blob", data_start + declared)
        if name in arrays:
            raise FormatError(f"duplicate tensor {name!r}", line_pos)
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        expect = off + nbytes
    if expect != declared:
        raise FormatError(f"{declared - expect} unclaimed bytes after last tensor", data_start + expect)
    return meta, arrays


def atomic_write(path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, kind: str, meta: dict, arrays: dict):
    atomic_write(path, encode(kind, meta, arrays))


def read(path, kind: str):
    return decode(Path(path).read_bytes(), kind)
