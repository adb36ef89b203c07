"""Flat binary parameter checkpoints.

Layout: magic b"GRPY", format version u32, then one record per entry:
u32 name length, UTF-8 name, u32 rank, u64 extents, little-endian float64
values. Metadata strings (taxonomy bindings and model layout hints) travel
as records named ``meta.<key>`` whose values are the UTF-8 byte codepoints;
that keeps the container flat and the round-trip bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GRPY"
VERSION = 1
_META_PREFIX = "meta."


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for key, text in (meta or {}).items():
            raw = text.encode("utf-8")
            vals = np.frombuffer(raw, dtype=np.uint8).astype("<f8")
            _write_record(fh, _META_PREFIX + key, vals)
        for name, arr in arrays.items():
            if name.startswith(_META_PREFIX):
                raise CheckpointError(f"parameter name {name!r} collides with metadata prefix")
            _write_record(fh, name, np.asarray(arr, dtype="<f8"))


def _write_record(fh, name: str, values: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", values.ndim))
    for ext in values.shape:
        fh.write(struct.pack("<Q", ext))
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes at offset 0: {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    while pos < len(blob):
        name, values, pos = _read_record(blob, pos)
        if name.startswith(_META_PREFIX):
            meta[name[len(_META_PREFIX):]] = bytes(values.astype(np.uint8)).decode("utf-8")
        else:
            arrays[name] = values
    return arrays, meta


def _read_record(blob: bytes, pos: int):
    def need(n, what):
        if pos + n > len(blob):
            raise CheckpointError(f"truncated {what} at offset {pos}")

    need(4, "name length")
    (nlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need(nlen, "name")
    name = blob[pos : pos + nlen].decode("utf-8")
    pos += nlen
    need(4, "rank")
    (rank,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need(8 * rank, "extents")
    shape = struct.unpack_from(f"<{rank}Q" if rank else "<0Q", blob, pos)
    pos += 8 * rank
    count = 1
    for ext in shape:
        count *= ext
    need(8 * count, f"values of {name!r}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
    pos += 8 * count
    return name, values, pos
