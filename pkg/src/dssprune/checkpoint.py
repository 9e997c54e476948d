"""Model checkpoints.

Layout::

    magic      8 bytes  b"DSSCKPT\\0"
    version    uint32 LE
    hdr_len    uint32 LE, then hdr_len bytes of UTF-8 JSON describing the
               architecture, seed and each parameter's shape and dtype
    payload    parameter arrays, little-endian, in header order
"""
from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import LayerKind, LayerSpec, ModelSpec
from .tensor import Tensor

MAGIC = b"DSSCKPT\0"
VERSION = 1


def save_checkpoint(model: ModelSpec, path) -> None:
    params = []
    for layer in model.layers:
        for name, p in layer.params.items():
            params.append({"layer": layer.layer_id, "name": name, "shape": list(p.shape), "dtype": p.dtype.str[1:]})
    header = {
        "format": VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "prunable_layers": list(model.prunable_layers),
        "seed": model.seed,
        "layers": [{"kind": l.kind.value, "id": l.layer_id, "hyper": l.hyper} for l in model.layers],
        "params": params,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr]
    for layer in model.layers:
        for p in layer.params.values():
            chunks.append(np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelSpec:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hdr_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    if len(buf) < 16 + hdr_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[16 : 16 + hdr_len].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc

    pos = 16 + hdr_len
    arrays: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["params"]:
        dtype = np.dtype("<" + entry["dtype"])
        count = math.prod(entry["shape"])
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated at byte {len(buf)} while reading {entry['layer']}.{entry['name']}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(entry["shape"])
        arrays[(entry["layer"], entry["name"])] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} unexpected trailing bytes")

    layers = []
    for entry in header["layers"]:
        params = {
            name: Tensor(arr, requires_grad=True) for (lid, name), arr in arrays.items() if lid == entry["id"]
        }
        layers.append(LayerSpec(LayerKind(entry["kind"]), entry["id"], params, dict(entry["hyper"])))
    return ModelSpec(
        layers,
        tuple(header["input_shape"]),
        header["class_count"],
        list(header["prunable_layers"]),
        header["seed"],
    )
