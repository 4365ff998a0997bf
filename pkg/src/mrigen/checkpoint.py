"""Binary parameter checkpoints.

Layout (little-endian)::

    8s   magic b"MRIGCKPT"
    u32  version
    32s  sha256 of the architecture manifest
    u32  metadata length, then UTF-8 JSON (UNet config, trained_steps)
    u32  tensor count, then per tensor:
         u16 name length, name, u8 dtype code, u8 ndim, u32 * ndim shape, data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInput
from .net import UNet, UNetConfig

MAGIC = b"MRIGCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def save_checkpoint(model: UNet, path) -> None:
    meta = {"config": json.loads(model.config.to_json()), "trained_steps": model.trained_steps}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(bytes.fromhex(model.manifest_hash()))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        params = list(model.named_parameters())
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            arr = p.detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    data = fh.read(size)
    if len(data) != size:
        raise InvalidInput("truncated checkpoint")
    return struct.unpack(fmt, data)


def load_checkpoint(path, expected_hash: str | None = None) -> UNet:
    """Rebuild a :class:`UNet` from ``path``.

    Raises :class:`InvalidInput` if the stored manifest hash disagrees with
    the rebuilt architecture or with ``expected_hash``.
    """
    with open(Path(path), "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InvalidInput(f"{path}: not a checkpoint")
        (version,) = _read(fh, "<I")
        if version != VERSION:
            raise InvalidInput(f"{path}: unsupported version {version}")
        stored_hash = fh.read(32).hex()
        (n_meta,) = _read(fh, "<I")
        meta = json.loads(fh.read(n_meta).decode("utf-8"))
        model = UNet(UNetConfig(**meta["config"]))
        if stored_hash != model.manifest_hash():
            raise InvalidInput(f"{path}: manifest hash mismatch")
        if expected_hash is not None and stored_hash != expected_hash:
            raise InvalidInput(f"{path}: manifest hash {stored_hash[:12]} != expected {expected_hash[:12]}")
        params = dict(model.named_parameters())
        (count,) = _read(fh, "<I")
        tensors = {}
        for _ in range(count):
            (n_name,) = _read(fh, "<H")
            name = fh.read(n_name).decode("utf-8")
            code, ndim = _read(fh, "<BB")
            shape = _read(fh, f"<{ndim}I")
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = fh.read(n_bytes)
            if len(data) != n_bytes:
                raise InvalidInput("truncated checkpoint")
            tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape)
    if set(tensors) != set(params):
        raise InvalidInput(f"{path}: tensor names do not match the manifest")
    dtype = torch.float64 if any(t.dtype == np.float64 for t in tensors.values()) else torch.float32
    model.to(dtype)
    with torch.no_grad():
        for name, arr in tensors.items():
            if tuple(arr.shape) != tuple(params[name].shape):
                raise InvalidInput(f"{path}: shape mismatch for {name}")
            params[name].copy_(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))))
    model.trained_steps = int(meta.get("trained_steps", 0))
    return model
