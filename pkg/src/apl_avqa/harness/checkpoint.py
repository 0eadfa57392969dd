"""Binary checkpoint: JSON header followed by named little-endian f32 blobs.

Layout::

    b"APLC" | u32 version | u32 header_len | header (UTF-8 JSON)
    u32 n_params | n_params x (u16 name_len | name | u32 ndim | ndim x u32 | f32 data)

The header carries the training configuration and its hash; loading rebuilds
the model from it and checks every parameter name and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..model import APLModel
from .config import TrainConfig

MAGIC = b"APLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: APLModel, config: TrainConfig, extra: dict | None = None) -> bytes:
    header = {"config": config.to_dict(), "config_hash": config.hash(), "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: APLModel, config: TrainConfig, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, config, extra))


def load_checkpoint(path) -> tuple[APLModel, TrainConfig, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not an APLC checkpoint")
    try:
        version, head_len = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported")
        pos = 12
        header = json.loads(blob[pos : pos + head_len].decode())
        pos += head_len
        config = TrainConfig.from_dict(header["config"])
        if config.hash() != header["config_hash"]:
            raise CheckpointError("config hash mismatch")
        model = APLModel(config.model_dims, config.model, seed=config.seed, dtype=np.float32)
        params = model.named_parameters()
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if count != len(params):
            raise CheckpointError(f"checkpoint has {count} parameters, model expects {len(params)}")
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            if name not in params or params[name].shape != tuple(shape):
                raise CheckpointError(f"unexpected parameter {name} with shape {shape}")
            size = int(np.prod(shape)) * 4
            params[name].data[...] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except (struct.error, KeyError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return model, config, header.get("extra", {})
