"""JSON documents holding float64 arrays as base64 little-endian bytes."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np


def encode_array(arr) -> dict:
    arr = np.asarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    shape = tuple(int(s) for s in doc["shape"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"array payload has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape)


def write_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
