"""Binary ParamStore files.

Layout::

    8 bytes   magic b"AMRODPS1"
    4 bytes   little-endian uint32 header length N
    N bytes   UTF-8 JSON header: {"layers": [[name, shape], ...], "provenance": {...}}
    rest      little-endian float64 values, layers concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .toydet import ParamStore

MAGIC = b"AMRODPS1"


class ModelFileError(ValueError):
    pass


def dumps(store: ParamStore, provenance: dict | None = None) -> bytes:
    header = {"layers": [[k, list(v.shape)] for k, v in store.items()], "provenance": provenance or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in store.layers.values())
    return MAGIC + struct.pack("<I", len(hb)) + hb + body


def loads(data: bytes, role: str = "source") -> tuple[ParamStore, dict]:
    if len(data) < 12:
        raise ModelFileError(f"file truncated at offset {len(data)}: need 12 header bytes")
    if data[:8] != MAGIC:
        raise ModelFileError(f"bad magic at offset 0: {data[:8]!r}")
    (n,) = struct.unpack("<I", data[8:12])
    if 12 + n > len(data):
        raise ModelFileError(f"header runs past end of file: offset 12 + {n} > {len(data)}")
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
        table = header["layers"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ModelFileError(f"unreadable header at offset 12: {e}") from None
    off = 12 + n
    layers = {}
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise ModelFileError(f"layer {name!r} truncated at offset {len(data)}: expected bytes {off}..{end}")
        layers[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise ModelFileError(f"{len(data) - off} trailing bytes after offset {off}")
    return ParamStore(layers, role), header.get("provenance", {})


def save(path: str | Path, store: ParamStore, provenance: dict | None = None) -> None:
    Path(path).write_bytes(dumps(store, provenance))


def load(path: str | Path, role: str = "source") -> tuple[ParamStore, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no source model at {p}; run `amrod pretrain` first")
    return loads(p.read_bytes(), role)
