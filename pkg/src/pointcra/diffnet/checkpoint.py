"""Flat binary tensor files.

Layout: one JSON manifest line (utf-8, ``\\n``-terminated) listing
``{"name", "shape"}`` entries in serialization order, followed by the
concatenated little-endian float64 payloads.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    head = {"tensors": entries}
    if meta:
        head["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_tensors(path):
    """Returns (ordered dict of arrays, meta dict)."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl])
    buf = memoryview(raw)[nl + 1:]
    out, off = {}, 0
    for e in head["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf[off: off + 8 * n], dtype="<f8").astype(np.float64)
        if arr.size != n:
            raise ValueError(f"{path}: truncated payload at {e['name']}")
        out[e["name"]] = arr.reshape(shape)
        off += 8 * n
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out, head.get("meta", {})


def save_module(path, module, meta=None) -> None:
    tensors = {f"param:{k}": p.data for k, p in module.named_parameters().items()}
    tensors.update({f"buffer:{k}": b for k, b in module.named_buffers().items()})
    write_tensors(path, tensors, meta)


def load_module(path, module):
    tensors, meta = read_tensors(path)
    params, buffers = module.named_parameters(), module.named_buffers()
    expected = {f"param:{k}" for k in params} | {f"buffer:{k}" for k in buffers}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise ValueError(f"checkpoint mismatch: missing={missing[:3]} extra={extra[:3]}")
    for k, p in params.items():
        src = tensors[f"param:{k}"]
        if src.shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {k}: {src.shape} vs {p.shape}")
        p.data[...] = src
    for k, b in buffers.items():
        b[...] = tensors[f"buffer:{k}"]
    return meta
