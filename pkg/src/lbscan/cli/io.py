"""Checkpoint and configuration file formats.

Checkpoint (magic ``LBCK``): a canonical key-sorted textual config block
followed by named float32 tensors, each as (u16 name length, name bytes,
u8 rank, u32 dims, little-endian f32 data).  Everything is byte-exact on a
save/load/save round trip: tensors are stored sorted by name and loaded
values upcast to float64 without loss.

Config files are flat ``key=value`` text, one entry per line, ``#`` for
comments.
"""

from __future__ import annotations

import struct

import numpy as np

from ..core import ShapeError
from ..model import ModelConfig

_MAGIC = b"LBCK"
_VERSION = 1


def config_block(cfg: ModelConfig) -> bytes:
    lines = [f"{k}={v}" for k, v in sorted(cfg.to_dict().items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    blob = config_block(cfg)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, params) with float64 arrays (exact upcast)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ShapeError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(4) != _MAGIC:
            raise ShapeError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ShapeError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        raw = fh.read(blob_len).decode("utf-8")
        cfg = ModelConfig.from_dict(parse_config_text(raw))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(dims)
            params[name] = data.astype(np.float64)
    return cfg, params


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ShapeError(f"config line {lineno} is not key=value: {line!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def read_config_file(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_dict(parse_config_text(fh.read()))


def write_config_file(path, cfg: ModelConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in sorted(cfg.to_dict().items()):
            fh.write(f"{k}={v}\n")
