"""Little-endian binary files for event streams, label grids and intensity images.

* ``EVS1``: 16-byte header (magic, width:u16, height:u16, count:u64) followed
  by ``count`` 9-byte records (x:u16, y:u16, t:u32 microseconds, p:i8).
* ``LBL1``: 8-byte header (magic, width:u16, height:u16) then ``H*W`` bytes.
* ``IMG1``: same header layout, then ``H*W`` float32 values.

Label and image files may hold several grids back to back (one per stack);
each grid repeats its header.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .events import EventStream

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "i1")])
EVS_HEADER = struct.Struct("<4sHHQ")
GRID_HEADER = struct.Struct("<4sHH")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}byte {offset}: {message}")
        self.offset = offset


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- events -------------------------------------------------------------------------


def encode_events(stream: EventStream) -> bytes:
    stream.validate()
    if len(stream) and int(stream.t.max()) > 0xFFFFFFFF:
        raise ValueError("timestamps exceed the u32 range of the EVS1 format")
    rec = np.empty(len(stream), dtype=EVENT_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    return EVS_HEADER.pack(b"EVS1", stream.width, stream.height, len(stream)) + rec.tobytes()


def decode_events(buf: bytes, path: str | None = None) -> EventStream:
    if len(buf) < EVS_HEADER.size:
        raise FormatError(f"truncated header ({len(buf)} of {EVS_HEADER.size} bytes)", len(buf), path)
    magic, width, height, count = EVS_HEADER.unpack_from(buf, 0)
    if magic != b"EVS1":
        raise FormatError(f"bad magic {magic!r}, expected b'EVS1'", 0, path)
    body = len(buf) - EVS_HEADER.size
    need = count * EVENT_DTYPE.itemsize
    if body < need:
        full = body // EVENT_DTYPE.itemsize
        raise FormatError(f"truncated record {full} of {count}", EVS_HEADER.size + full * EVENT_DTYPE.itemsize, path)
    if body > need:
        raise FormatError(f"{body - need} trailing bytes after {count} records", EVS_HEADER.size + need, path)
    rec = np.frombuffer(buf, dtype=EVENT_DTYPE, count=count, offset=EVS_HEADER.size)
    stream = EventStream(rec["x"].astype(np.uint16), rec["y"].astype(np.uint16), rec["t"].astype(np.int64),
                         rec["p"].astype(np.int8), int(width), int(height))
    try:
        stream.validate()
    except ValueError as exc:
        idx = getattr(exc, "index", None)
        off = EVS_HEADER.size + idx * EVENT_DTYPE.itemsize if idx is not None else EVS_HEADER.size
        raise FormatError(str(exc), off, path) from None
    return stream


def write_events(path, stream: EventStream) -> None:
    atomic_write(path, encode_events(stream))


def read_events(path) -> EventStream:
    return decode_events(Path(path).read_bytes(), str(path))


# -- label grids / images ---------------------------------------------------------


def _encode_grids(magic: bytes, grids, dtype) -> bytes:
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[None]
    if grids.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) grids, got shape {grids.shape}")
    n, h, w = grids.shape
    out = bytearray()
    for g in grids:
        out += GRID_HEADER.pack(magic, w, h)
        out += np.ascontiguousarray(g, dtype=dtype).tobytes()
    return bytes(out)


def _decode_grids(magic: bytes, buf: bytes, dtype, path: str | None) -> np.ndarray:
    dtype = np.dtype(dtype)
    grids = []
    off = 0
    shape = None
    while off < len(buf):
        if len(buf) - off < GRID_HEADER.size:
            raise FormatError("trailing bytes shorter than a grid header", off, path)
        m, w, h = GRID_HEADER.unpack_from(buf, off)
        if m != magic:
            raise FormatError(f"bad magic {m!r}, expected {magic!r}", off, path)
        if shape is not None and (h, w) != shape:
            raise FormatError(f"grid size {(h, w)} differs from first grid {shape}", off, path)
        shape = (h, w)
        n = h * w * dtype.itemsize
        start = off + GRID_HEADER.size
        if len(buf) - start < n:
            raise FormatError(f"truncated payload ({len(buf) - start} of {n} bytes)", len(buf), path)
        grids.append(np.frombuffer(buf, dtype=dtype, count=h * w, offset=start).reshape(h, w).copy())
        off = start + n
    if not grids:
        raise FormatError("file holds no grids", 0, path)
    return np.stack(grids)


def encode_labels(grids) -> bytes:
    return _encode_grids(b"LBL1", grids, np.uint8)


def decode_labels(buf: bytes, path: str | None = None) -> np.ndarray:
    return _decode_grids(b"LBL1", buf, np.uint8, path)


def encode_images(grids) -> bytes:
    return _encode_grids(b"IMG1", grids, "<f4")


def decode_images(buf: bytes, path: str | None = None) -> np.ndarray:
    return _decode_grids(b"IMG1", buf, "<f4", path).astype(np.float32)


def write_labels(path, grids) -> None:
    atomic_write(path, encode_labels(grids))


def read_labels(path) -> np.ndarray:
    return decode_labels(Path(path).read_bytes(), str(path))


def write_images(path, grids) -> None:
    atomic_write(path, encode_images(grids))


def read_images(path) -> np.ndarray:
    return decode_images(Path(path).read_bytes(), str(path))
