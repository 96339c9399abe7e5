"""Self-describing tensor container used for checkpoints and backbone weights.

Layout::

    8 bytes   magic b"BBSCKPT\\0"
    4 bytes   schema version (little-endian u32)
    8 bytes   header length N (little-endian u64)
    N bytes   UTF-8 JSON header: {"schema_version", "meta", "tensors": [
                  {"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    ...       raw little-endian tensor bytes, concatenated
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np
import torch

MAGIC = b"BBSCKPT\0"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


def config_hash(*configs) -> str:
    blob = json.dumps(configs, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_container(path, tensors: dict, meta: dict):
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"schema_version": SCHEMA_VERSION, "meta": meta, "tensors": table}).encode()
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, SCHEMA_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_container(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode())
        data = memoryview(raw)[start + hlen:]
        tensors = {}
        for row in header["tensors"]:
            if row["offset"] + row["nbytes"] > len(data):
                raise CheckpointError(f"{path}: tensor {row['name']} extends past end of file")
            arr = np.frombuffer(data[row["offset"]:row["offset"] + row["nbytes"]],
                                dtype=np.dtype(row["dtype"]).newbyteorder("<"))
            tensors[row["name"]] = torch.from_numpy(arr.reshape(row["shape"]).copy())
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    return tensors, header.get("meta", {})


def _flatten_optimizer(state: dict):
    tensors, plain = {}, {}
    for idx, st in state["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim.state.{idx}.{key}"] = val
            else:
                plain[f"{idx}.{key}"] = val
    return tensors, {"param_groups": state["param_groups"], "plain": plain}


def _unflatten_optimizer(tensors: dict, info: dict) -> dict:
    state = {}
    for name, t in tensors.items():
        _, _, idx, key = name.split(".", 3)
        state.setdefault(int(idx), {})[key] = t
    for name, val in info.get("plain", {}).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": info["param_groups"]}


def save_checkpoint(path, model, optimizer=None, meta=None):
    meta = dict(meta or {})
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        opt_tensors, opt_info = _flatten_optimizer(optimizer.state_dict())
        tensors.update(opt_tensors)
        meta["optimizer"] = opt_info
    write_container(path, tensors, meta)


def load_checkpoint(path):
    """Return ``(model_state, optimizer_state_or_None, meta)``."""
    tensors, meta = read_container(path)
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    if not model_state:
        raise CheckpointError(f"{path}: no model tensors")
    opt = None
    if "optimizer" in meta:
        opt = _unflatten_optimizer({k: v for k, v in tensors.items() if k.startswith("optim.")},
                                   meta["optimizer"])
    return model_state, opt, meta


def load_model(path):
    """Rebuild a model from a checkpoint's recorded configuration."""
    from .model import BBSNet, ModelConfig

    state, _, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model_config")
    cfg = ModelConfig.from_dict(meta["model_config"])
    cfg.backbone.weights = None
    model = BBSNet(cfg)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the recorded configuration ({exc})") from exc
    return model, meta
