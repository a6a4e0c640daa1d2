"""Named-tensor checkpoint files.

Layout: a magic line ``sadrive-ckpt v1``, one JSON manifest line listing
``name``, ``shape`` and byte ``offset`` of every tensor (plus free-form
``meta``), then the tensors as contiguous little-endian float32.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "sadrive-ckpt v1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"tensors": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write((MAGIC + "\n").encode())
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl1 = raw.index(b"\n")
    if raw[:nl1].decode() != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    nl2 = raw.index(b"\n", nl1 + 1)
    manifest = json.loads(raw[nl1 + 1 : nl2])
    body = raw[nl2 + 1 :]
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest.get("meta", {})
