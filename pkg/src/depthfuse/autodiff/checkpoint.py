"""Named-tensor checkpoint files.

Layout::

    DEPTHFUSE-CKPT 1\\n
    <one line of JSON: {"blob_bytes": N, "meta": {...}, "tensors": [{name, shape, offset, dtype}]}>\\n
    <N bytes: little-endian float32 data, tensors back to back>

The JSON is written with sorted keys and no whitespace variation, so saving
the same content twice yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DEPTHFUSE-CKPT 1\n"
_DTYPES = {"f32": np.dtype("<f4")}


class CheckpointError(ValueError):
    """The checkpoint file is malformed or does not match expectations."""


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPES["f32"])
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32"})
        chunks.append(raw)
        offset += len(raw)
    header = {"blob_bytes": offset, "meta": dict(meta or {}), "tensors": entries}
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return MAGIC + line.encode("utf-8") + b"\n" + b"".join(chunks)


def decode(payload: bytes) -> tuple[dict, dict]:
    if not payload.startswith(MAGIC):
        raise CheckpointError("not a depthfuse checkpoint (bad magic line)")
    end = payload.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("corrupt header: missing terminator")
    try:
        header = json.loads(payload[len(MAGIC):end].decode("utf-8"))
        entries = header["tensors"]
        blob_bytes = int(header["blob_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    blob = payload[end + 1:]
    if len(blob) != blob_bytes:
        raise CheckpointError(f"blob length {len(blob)} does not match header ({blob_bytes} bytes)")
    tensors = {}
    for entry in entries:
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} for {entry.get('name')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, stop = int(entry["offset"]), int(entry["offset"]) + count * dtype.itemsize
        if start < 0 or stop > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} extends past the end of the blob")
        tensors[entry["name"]] = np.frombuffer(blob[start:stop], dtype=dtype).reshape(shape).astype(np.float32)
    return tensors, header.get("meta", {})


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, meta))
    return path


def load_tensors(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())
