"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"RATTNCK\\0"
    offset 8   uint32    format version (1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header, keys sorted:
                           {"config": UNetConfig fields,
                            "meta": free-form dict (vocabulary, schedule, ...),
                            "params": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    16 + H     payload   raw parameter bytes, concatenated in header order;
                         "offset" is relative to the payload start.

Parameters are stored in their in-memory dtype ("<f4" or "<f8").
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError
from .unet import ToyUNet, UNetConfig

MAGIC = b"RATTNCK\x00"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def checkpoint_bytes(model: ToyUNet, meta: dict | None = None) -> bytes:
    params, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(_DTYPES[tensor.dtype], copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        params.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPES[tensor.dtype],
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}, "params": params},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(model: ToyUNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, meta))
    return path


def load_checkpoint(path) -> tuple[ToyUNet, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}", code="E_MISSING_FILE", path=str(path))
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)", code="E_CHECKPOINT")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}", code="E_CHECKPOINT")
    header = json.loads(data[16:16 + hlen])
    payload = memoryview(data)[16 + hlen:]
    model = ToyUNet(UNetConfig.from_dict(header["config"]))
    state = {}
    for p in header["params"]:
        arr = np.frombuffer(payload, dtype=p["dtype"], count=int(np.prod(p["shape"], dtype=np.int64)),
                            offset=p["offset"]).reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.copy())
    dtype = _TORCH[header["params"][0]["dtype"]] if header["params"] else torch.float32
    model = model.to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise DataError(f"checkpoint parameters do not match its config: {e}", code="E_CHECKPOINT") from None
    model.eval()
    return model, header["meta"]
