"""Versioned binary checkpoints.

Layout (little-endian)::

    "SEDN" | version:u32 | meta_len:u32 | meta (UTF-8 JSON) | count:u32 | entries...
    entry: name_len:u16 | name | dtype_len:u8 | dtype (numpy str) | ndim:u8 | shape:u32*ndim
           | nbytes:u64 | crc32:u32 | raw bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autograd.tensor import get_default_dtype
from .formats import FormatError, atomic_write
from .genotype import Genotype
from .network import ModelConfig, SpikingEDN

MAGIC = b"SEDN"
FORMAT_VERSION = 1


class PrecisionError(TypeError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_b)) + meta_b)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.array(tensors[name], order="C", copy=True)  # ascontiguousarray would turn 0-d into 1-d
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        nb = name.encode()
        dt = arr.dtype.str.encode()
        raw = arr.tobytes()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<QI", len(raw), zlib.crc32(raw)) + raw
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path: str | None):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated {what} (need {n} bytes, {len(self.buf) - self.off} left)", self.off, self.path)
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf: bytes, path: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'SEDN'", 0, path)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (reader is {FORMAT_VERSION})", 4, path)
    (mlen,) = r.unpack("<I", "metadata length")
    start = r.off
    try:
        meta = json.loads(r.take(mlen, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON ({exc})", start, path) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        entry = r.off
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode(errors="replace")
        (dlen,) = r.unpack("<B", "dtype length")
        dpos = r.off
        try:
            dtype = np.dtype(r.take(dlen, "dtype").decode())
        except TypeError:
            raise FormatError(f"tensor {name!r}: unknown dtype", dpos, path) from None
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        nbytes, crc = r.unpack("<QI", "size and checksum")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"tensor {name!r}: {nbytes} bytes do not match shape {shape}", entry, path)
        dpos = r.off
        raw = r.take(nbytes, f"data of tensor {name!r}")
        if zlib.crc32(raw) != crc:
            raise FormatError(f"tensor {name!r}: checksum mismatch", dpos, path)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes", r.off, path)
    return tensors, meta


def model_meta(model: SpikingEDN, **extra) -> dict:
    meta = {
        "genotype": model.genotype.to_text(),
        "genotype_hash": model.genotype.digest(),
        "model": model.cfg.to_dict(),
        "precision": np.dtype(model.parameters()[0].dtype).name,
    }
    meta.update(extra)
    return meta


def save_checkpoint(model: SpikingEDN, meta: dict | None, path, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.asarray(v)
    full = model_meta(model)
    full.update(meta or {})
    atomic_write(path, encode_checkpoint(tensors, full))


def load_checkpoint(path, dtype=None) -> tuple[SpikingEDN, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns ``(model, meta, extra_tensors)``.

    The stored float precision must equal ``dtype`` (default: the current
    engine precision); nothing is cast silently.
    """
    tensors, meta = decode_checkpoint(Path(path).read_bytes(), str(path))
    want = np.dtype(dtype or get_default_dtype())
    stored = {t.dtype for k, t in tensors.items() if k.startswith("model.") and t.dtype.kind == "f"}
    if stored and stored != {want}:
        raise PrecisionError(f"checkpoint holds {sorted(d.name for d in stored)} tensors but precision is {want.name}")
    cfg = ModelConfig.from_dict(meta["model"])
    model = SpikingEDN(Genotype.from_text(meta["genotype"]), cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra.")}
    model.eval()
    return model, meta, extra
