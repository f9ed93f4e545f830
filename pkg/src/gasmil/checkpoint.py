"""Binary parameter checkpoints.

Layout (little-endian)::

    b"GMCK"                       magic
    u32                           version (= 1)
    u32 L, L bytes                JSON: {"arch": ..., "model": {...model config...}}
    repeated until end of file, in the model's canonical parameter order:
        u16 K, K bytes            parameter name (UTF-8)
        u32 rows, u32 cols        shape; 1-D parameters are stored as 1 x q
        8*rows*cols bytes         float64 values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .baselines import model_from_json
from .errors import FormatError

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1


def encode_checkpoint(model, params):
    meta = json.dumps({"arch": model.arch, "model": model.config.to_json()}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta]
    for p in params:
        value = p.value if p.value.ndim == 2 else p.value.reshape(1, -1)
        name = p.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack("<II", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data):
    """Return ``(model, params)`` rebuilt from checkpoint bytes."""
    data = bytes(data)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", len(data))
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}", 0)
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    if len(data) < pos + meta_len:
        raise FormatError("truncated checkpoint config", len(data))
    try:
        meta = json.loads(data[pos : pos + meta_len])
        model = model_from_json(meta["arch"], meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint config: {exc}", pos) from None
    pos += meta_len
    params = model.init_params(np.random.default_rng(0))
    for p in params:
        start = pos
        if len(data) < pos + 2:
            raise FormatError(f"missing parameter {p.name!r}", pos)
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8", errors="replace")
        pos += name_len
        if name != p.name:
            raise FormatError(f"expected parameter {p.name!r}, found {name!r}", start)
        if len(data) < pos + 8:
            raise FormatError(f"truncated shape of {name!r}", pos)
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        if rows * cols != p.value.size:
            raise FormatError(f"parameter {name!r} is {rows}x{cols}, model expects {p.value.shape}", pos - 8)
        nbytes = rows * cols * 8
        if len(data) < pos + nbytes:
            raise FormatError(f"truncated values of {name!r}", len(data))
        p.value[...] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(p.value.shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} unexpected trailing bytes", pos)
    params.bump()
    return model, params


def save_checkpoint(path, model, params):
    Path(path).write_bytes(encode_checkpoint(model, params))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def describe_checkpoint(data):
    """Header summary (arch, config and parameter shapes) for ``inspect``."""
    model, params = decode_checkpoint(data)
    return {
        "kind": "checkpoint",
        "arch": model.arch,
        "config": model.config.to_json(),
        "parameters": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
