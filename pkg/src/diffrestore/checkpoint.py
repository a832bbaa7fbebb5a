"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    magic      4 bytes   b"DRCK"
    version    uint32    format version, currently 1
    json_len   uint64    byte length of the manifest
    manifest   UTF-8 JSON: {"config": {...}, "arrays": [{"name", "shape"}, ...]}
    data       concatenated float32 little-endian buffers, manifest order

Arrays are stored as float32 regardless of in-memory dtype; loading returns
float32.  Writes go to a temp file in the same directory and are renamed into
place so a crash never leaves a truncated checkpoint at the target path.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Mapping

import numpy as np

MAGIC = b"DRCK"
VERSION = 1


def save_checkpoint(path: str, config: dict,
                    arrays: Mapping[str, np.ndarray]) -> None:
    entries = []
    buffers = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape)})
        buffers.append(a.tobytes())
    manifest = json.dumps({"config": config, "arrays": entries}).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(manifest)))
            f.write(manifest)
            for buf in buffers:
                f.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (json_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(json_len).decode("utf-8"))
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"truncated data for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after declared arrays")
    return manifest["config"], arrays


def module_arrays(module) -> dict[str, np.ndarray]:
    """Extract a torch module's parameters and buffers as numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[name] = tensor.detach().cpu().numpy()
    return out


def load_module_arrays(module, arrays: Mapping[str, np.ndarray]) -> None:
    """Load arrays produced by :func:`module_arrays` back into a module."""
    import torch

    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ValueError(f"state mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    new_state = {}
    for name, arr in arrays.items():
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(state[name].dtype)
        if tuple(t.shape) != tuple(state[name].shape):
            raise ValueError(f"shape mismatch for {name!r}")
        new_state[name] = t
    module.load_state_dict(new_state)
