"""Checkpoint files: a UTF-8 JSON manifest followed by raw array bytes.

Layout of a .ckpt file:

    MCLCKPT1 <manifest_bytes>\n
    <manifest JSON, UTF-8>
    <payload: concatenated little-endian arrays>

The manifest records every array's name, dtype, shape and byte offset
into the payload, plus free-form string metadata (config hash, global
step). Arrays round-trip bitwise, which is what makes resumed training
indistinguishable from an uninterrupted run.
"""
from __future__ import annotations

import json

import numpy as np

_MAGIC = b"MCLCKPT1"


def save_checkpoint(path: str, arrays: dict[str, np.ndarray],
                    meta: dict[str, str]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"meta": {k: str(v) for k, v in meta.items()}, "arrays": entries},
        indent=1).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC + b" %d\n" % len(manifest))
        f.write(manifest)
        f.write(b"\n")
        f.write(b"".join(chunks))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        header = f.readline()
        if not header.startswith(_MAGIC + b" "):
            raise ValueError(f"{path} is not a checkpoint file")
        n_manifest = int(header.split()[1])
        manifest = json.loads(f.read(n_manifest).decode("utf-8"))
        f.read(1)  # newline separating manifest from payload
        payload = f.read()
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated payload for array {e['name']!r}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
    return arrays, dict(manifest["meta"])
