"""Versioned checkpoint container.

A checkpoint is a JSON document with sorted keys; each tensor is stored as
base64 of its little-endian float64 bytes plus its shape, so a save/load
round trip is bit-exact and two saves of equal parameters are byte-identical.
"""

import base64
import json
from pathlib import Path

import numpy as np

FORMAT = "dsvb-checkpoint"
VERSION = 1


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).astype(np.float64).reshape(d["shape"])


def save_checkpoint(path, kind, tensors, meta):
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": {k: encode_array(v) for k, v in tensors.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    doc["tensors"] = {k: decode_array(v) for k, v in doc["tensors"].items()}
    return doc
