"""File formats: flat float32 tensors, PGM/PPM rasters, CSV tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

TENSOR_MAGIC = "sadrive-tensor v1"


def save_tensor(path, array: np.ndarray, meta: dict | None = None) -> None:
    """Header line, JSON line with ``dims`` (and optional meta), then little-endian float32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"dims": list(arr.shape), **(meta or {})}
    with open(path, "wb") as fh:
        fh.write((TENSOR_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(arr.tobytes())


def load_tensor(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    nl1 = raw.index(b"\n")
    if raw[:nl1].decode() != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a {TENSOR_MAGIC} file")
    nl2 = raw.index(b"\n", nl1 + 1)
    header = json.loads(raw[nl1 + 1 : nl2])
    dims = header["dims"]
    arr = np.frombuffer(raw[nl2 + 1 :], dtype="<f4").reshape(dims)
    return arr.astype(np.float32), header


BITS_MAGIC = "sadrive-bits v1"


def save_bits(path, array: np.ndarray) -> None:
    """Binary (0/1) arrays, bit-packed after a header line and a JSON dims line."""
    arr = np.asarray(array)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("save_bits: array must contain only 0 and 1")
    with open(path, "wb") as fh:
        fh.write((BITS_MAGIC + "\n").encode())
        fh.write((json.dumps({"dims": list(arr.shape)}) + "\n").encode())
        fh.write(np.packbits(arr.astype(bool), axis=None).tobytes())


def load_bits(path, dtype=np.float32) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl1 = raw.index(b"\n")
    if raw[:nl1].decode() != BITS_MAGIC:
        raise ValueError(f"{path}: not a {BITS_MAGIC} file")
    nl2 = raw.index(b"\n", nl1 + 1)
    dims = json.loads(raw[nl1 + 1 : nl2])["dims"]
    n = int(np.prod(dims))
    bits = np.unpackbits(np.frombuffer(raw[nl2 + 1 :], np.uint8), count=n)
    return bits.reshape(dims).astype(dtype)


def save_pgm(path, image: np.ndarray) -> None:
    """8-bit binary greyscale (P5)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def save_ppm(path, image: np.ndarray) -> None:
    """8-bit binary RGB (P6); ``image`` is H×W×3."""
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def load_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, _maxval, body = parts[0], int(parts[1]), int(parts[2]), parts[3], parts[4]
    if magic == b"P5":
        return np.frombuffer(body, np.uint8, count=w * h).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, np.uint8, count=w * h * 3).reshape(h, w, 3)
    raise ValueError(f"{path}: unsupported PNM type {magic!r}")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
