"""KTNSR v1 tensor checkpoints.

Layout: one line of UTF-8 JSON terminated by ``\\n``::

    {"format_version": 1, "meta": {...},
     "tensors": [{"name", "dtype": "f32", "shape", "byte_offset", "byte_len"}, ...]}

followed by the concatenated little-endian float32 payload in row-major
order. ``byte_offset`` is relative to the first payload byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(np.shape(arr)),
                        "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    return json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(chunks)


def loads(blob: bytes):
    """Returns ``(tensors, meta)``; validates version, offsets and lengths."""
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing KTNSR header line")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable KTNSR header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    payload = memoryview(blob)[nl + 1:]
    total = sum(e["byte_len"] for e in header["tensors"])
    if total != len(payload):
        raise CheckpointError(f"payload is {len(payload)} bytes but the manifest describes {total}")
    tensors = {}
    for e in header["tensors"]:
        if e.get("dtype") != "f32":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if 4 * count != e["byte_len"]:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} needs {4 * count} bytes, manifest says "
                                  f"{e['byte_len']}")
        lo = e["byte_offset"]
        if lo < 0 or lo + e["byte_len"] > len(payload):
            raise CheckpointError(f"{e['name']}: byte range outside payload")
        tensors[e["name"]] = np.frombuffer(payload[lo:lo + e["byte_len"]], dtype="<f4").astype(
            np.float32).reshape(e["shape"])
    return tensors, header.get("meta", {})


def save(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    tmp.replace(path)


def load(path):
    return loads(Path(path).read_bytes())
