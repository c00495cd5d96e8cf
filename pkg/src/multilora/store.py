"""Checkpoint files, run-config files and atomic writes.

Checkpoint layout (all little-endian)::

    b"MLRA" | u32 version | u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype tag, u8 rank,
                u32 per dim, row-major payload
    u32 CRC32 of every preceding byte

dtype tags: 0 = float32, 1 = float64, 2 = uint8. The uint8 tag is only
used for the reserved ``__metadata__`` tensor, which carries the run
metadata as UTF-8 JSON.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"MLRA"
VERSION = 1
METADATA_KEY = "__metadata__"

_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    tag = _TAGS.get(np.dtype(dt))
    if tag is None:
        raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError(f"tensor {name!r}: rank too large")
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError("tensor name too long")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    items = list(ckpt.tensors.items())
    if METADATA_KEY in ckpt.tensors:
        raise FormatError(f"{METADATA_KEY!r} is reserved")
    if ckpt.metadata:
        meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        items.append((METADATA_KEY, np.frombuffer(meta, dtype=np.uint8)))
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(items))]
    parts += [_encode_tensor(name, arr) for name, arr in items]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise FormatError("file too short to be a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("CRC mismatch")
    if body[:4] != MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    metadata = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if tag not in _DTYPES:
                raise FormatError(f"unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise FormatError("truncated payload")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
            if name in tensors or (name == METADATA_KEY and metadata):
                raise FormatError(f"duplicate tensor name {name!r}")
            if name == METADATA_KEY:
                metadata = json.loads(arr.tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes after last tensor")
    return Checkpoint(tensors, metadata, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _site_key(ckpt: Checkpoint, site: str) -> str:
    for key in (site, site + ".weight"):
        if key in ckpt.tensors:
            return key
    raise ValueError(f"site {site!r} not found in checkpoint")


def delta_from_checkpoints(base: Checkpoint, tuned: Checkpoint, site: str) -> np.ndarray:
    """W_tuned - W_base for one site, in double precision."""
    b = base.tensors[_site_key(base, site)]
    t = tuned.tensors[_site_key(tuned, site)]
    if b.shape != t.shape:
        raise ValueError(f"site {site!r}: shape {b.shape} vs {t.shape}")
    return t.astype(np.float64) - b.astype(np.float64)


# -- flat key = value config files -------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(values: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())
