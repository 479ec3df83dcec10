"""Binary checkpoint format.

Layout: 4 magic bytes "PSAN", one version byte, a 4-byte little-endian
manifest length, the UTF-8 JSON manifest, then the raw little-endian float
payload. The manifest carries the config snapshot and, for every state
tensor, its name, shape, dtype, and byte offset into the payload. Entry
order is the model's deterministic state order, so save -> load -> save is
byte-identical.
"""

import json
import struct

import numpy as np

from .config import ModelConfig
from .model import TextRecognizer

MAGIC = b"PSAN"
VERSION = 1
_DTYPE_CODES = {"float32": "f32", "float64": "f64"}
_DTYPE_FROM_CODE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model):
    entries = model.state_entries()
    tensors = []
    payload = bytearray()
    for name, arr in entries:
        code = _DTYPE_CODES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": len(payload)})
        payload.extend(np.ascontiguousarray(arr, dtype=_DTYPE_FROM_CODE[code]).tobytes())
    manifest = {"config": model.cfg.to_dict(), "tensors": tensors}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path):
    """Read a checkpoint and rebuild the model it describes."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    if data[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {data[4]}, expected {VERSION}")
    (mlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[9:9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = data[9 + mlen:]

    cfg = ModelConfig.from_dict(manifest["config"])
    model = TextRecognizer(cfg)
    state = dict(model.state_entries())
    if len(state) != len(manifest["tensors"]):
        raise CheckpointError(f"{path}: manifest has {len(manifest['tensors'])} tensors, "
                              f"model expects {len(state)}")
    for entry in manifest["tensors"]:
        name = entry["name"]
        arr = state.get(name)
        if arr is None:
            raise CheckpointError(f"{path}: unknown tensor {name!r} in manifest")
        shape = tuple(entry["shape"])
        if shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} "
                                  f"does not match model shape {arr.shape}")
        dtype = _DTYPE_FROM_CODE.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype "
                                  f"{entry['dtype']!r}")
        start = entry["offset"]
        end = start + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        values = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        arr[...] = values.astype(arr.dtype)
    return model, cfg
