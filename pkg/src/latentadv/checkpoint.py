"""Single-file container for named float64 tensors.

Layout: 4-byte magic ``LADV``, little-endian u32 format version, u64
header length, a JSON header (list of {name, shape, offset, length},
offsets relative to the payload that follows), then the raw payload of
little-endian float64 data. Save -> load round trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["MAGIC", "FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"LADV"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for any malformed or inconsistent checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8", order="C")
        raw = arr.tobytes()
        entries.append(
            {"name": str(name), "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 16:
        raise CheckpointError("truncated payload")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + header_len > len(blob):
        raise CheckpointError("truncated payload")
    try:
        entries = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if not isinstance(entries, list):
        raise CheckpointError("corrupt header: expected a list of tensor entries")
    payload = blob[16 + header_len :]

    spans = []
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt header entry: {exc}") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        expected = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        if length != expected:
            raise CheckpointError(
                f"corrupt header: tensor {name!r} length {length} != shape size {expected}"
            )
        if offset < 0 or offset + length > len(payload):
            raise CheckpointError("truncated payload")
        spans.append((offset, offset + length, name))
        arr = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=offset)
        tensors[name] = arr.reshape(shape).copy()

    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise CheckpointError(f"overlapping tensor ranges: {name_a!r} and {name_b!r}")
    return tensors
