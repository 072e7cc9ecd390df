"""Versioned checkpoint container.

Layout::

    8 bytes   magic  b"TIMEVQ\\x00\\x01"
    4 bytes   format version (little-endian uint32)
    8 bytes   header length (little-endian uint64)
    header    UTF-8 JSON: stage, config, config hash, creation metadata,
              tensor index (name, dtype, shape, offset, nbytes)
    payload   raw little-endian tensor bytes in index order

The payload depends only on the tensors, so save -> load -> save reproduces
it byte for byte.  No pickling is involved.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"TIMEVQ\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    config_hash: str
    tensors: dict
    meta: dict = field(default_factory=dict)

    def payload_hash(self) -> str:
        return hashlib.sha256(_payload(self.tensors)[1]).hexdigest()


def _payload(tensors: dict):
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    index, payload = _payload(ckpt.tensors)
    meta = dict(ckpt.meta)
    meta.setdefault("created", _dt.datetime.now(_dt.timezone.utc).isoformat())
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "config_hash": ckpt.config_hash,
                         "meta": meta, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    return path


def read_checkpoint(path, stage: Optional[str] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    if stage is not None and header["stage"] != stage:
        raise CheckpointError(f"{path}: expected a {stage} checkpoint, found {header['stage']}")
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        arr = np.frombuffer(data[lo:lo + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return Checkpoint(header["stage"], header["config"], header["config_hash"], tensors, header["meta"])


def payload_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    _, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    return data[len(MAGIC) + struct.calcsize("<IQ") + hlen:]


def flatten_optimizer(state: dict, prefix: str = "optim"):
    """Split an optimizer state dict into (tensors, JSON-able remainder)."""
    tensors, rest = {}, {"param_groups": state["param_groups"], "state": {}}
    for pid, slots in state["state"].items():
        rest["state"][str(pid)] = {}
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}.{pid}.{key}"] = value
                rest["state"][str(pid)][key] = None
            else:
                rest["state"][str(pid)][key] = value
    return tensors, rest


def unflatten_optimizer(tensors: dict, rest: dict, prefix: str = "optim") -> dict:
    state = {}
    for pid, slots in rest["state"].items():
        state[int(pid)] = {k: tensors[f"{prefix}.{pid}.{k}"] if v is None else v
                           for k, v in slots.items()}
    return {"state": state, "param_groups": rest["param_groups"]}


def module_tensors(module: torch.nn.Module, prefix: str = "model") -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str = "model"):
    sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing, unexpected = module.load_state_dict(sd, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    return module
