"""On-disk formats shared by every stage.

Checkpoint layout (all integers little-endian)::

    b"STEGOLAB"            8-byte magic
    u32 version            currently 1
    u32 meta_len, bytes    UTF-8 key=value lines
    u32 n_params
    per parameter:
        u32 name_len, bytes
        u32 ndim, u64 * ndim dims
        f64 * prod(dims)   C order
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

MAGIC = b"STEGOLAB"
VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


def save_checkpoint(path: PathLike, params: Mapping[str, np.ndarray],
                    meta: Mapping[str, object] | None = None) -> None:
    meta_bytes = format_kv(meta or {}).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: PathLike) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta = parse_kv(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params[name] = arr.astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after parameter list")
    return params, meta


def format_kv(items: Mapping[str, object]) -> str:
    lines = []
    for k, v in items.items():
        if "\n" in str(v) or "=" in str(k):
            raise ValueError(f"cannot serialise key {k!r}")
        lines.append(f"{k}={_fmt(v)}")
    return "\n".join(lines) + ("\n" if lines else "")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def parse_kv(text: str) -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = OrderedDict()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def write_kv(path: PathLike, items: Mapping[str, object]) -> None:
    Path(path).write_text(format_kv(items))


def read_kv(path: PathLike) -> Dict[str, str]:
    return parse_kv(Path(path).read_text())


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a digest as 16 hex digits."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def file_digest(path: PathLike) -> str:
    return fnv1a64(Path(path).read_bytes())
