"""Versioned binary checkpoint container.

Layout: magic ``CILM``, u32 format version, u64 header length, a
canonical JSON header (sorted keys, no whitespace) describing the model
config, training step, rng state and tensor table, then the raw tensor
bytes concatenated in the documented parameter order.  Writing the same
state twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InvalidInputError
from .model import ModelConfig, ModelState, parameter_names

MAGIC = b"CILM"
FORMAT_VERSION = 1


def save_checkpoint(path, state: ModelState, rng_state: dict | None = None) -> None:
    names = parameter_names(state.config)
    tensors = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(state.params[name])
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "config": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(state.config).items()
        },
        "step": state.step,
        "rng_state": rng_state,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelState, dict | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise InvalidInputError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        cfg_payload = dict(header["config"])
        for key in ("codebook_sizes", "loss_weights"):
            cfg_payload[key] = tuple(cfg_payload[key])
        cfg = ModelConfig(**cfg_payload)
        params = {}
        for spec in header["tensors"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = fh.read(count * dtype.itemsize)
            params[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy()
    if list(params) != parameter_names(cfg):
        raise InvalidInputError("checkpoint tensor table does not match the config")
    return ModelState(params, cfg, step=int(header["step"])), header.get("rng_state")
