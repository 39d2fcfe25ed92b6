"""Binary tensor format and checkpoint files.

Single-tensor record layout (all little-endian):

    magic b"THEM" | version u16 | rank u8 | dims u32 each | float64 payload

Payload is row-major. A checkpoint file is a JSON manifest followed by
concatenated tensor records:

    u64 manifest_length | manifest JSON (utf-8) | records

The manifest maps parameter name -> {offset, shape}, offsets relative to
the start of the record section, plus free-form metadata.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"THEM"
FORMAT_VERSION = 1

__all__ = [
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
    "save_checkpoint",
    "load_checkpoint",
]


def write_tensor(fh, array: np.ndarray) -> int:
    """Append one tensor record to a binary stream; returns bytes written."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise CheckpointError("rank exceeds format limit")
    header = MAGIC + struct.pack("<HB", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f8").tobytes(order="C")
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<HB", fh.read(3))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors plus metadata as a single checkpoint file."""
    blob = io.BytesIO()
    entries = {}
    for name in sorted(tensors):
        offset = blob.tell()
        write_tensor(blob, tensors[name])
        entries[name] = {"offset": offset, "shape": list(np.shape(tensors[name]))}
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta or {},
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        fh.write(blob.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (name -> ndarray, metadata)."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint: {e}") from None
    with fh:
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError("unsupported checkpoint format version")
        base = fh.tell()
        tensors = {}
        for name, entry in manifest["tensors"].items():
            fh.seek(base + entry["offset"])
            arr = read_tensor(fh)
            if list(arr.shape) != list(entry["shape"]):
                raise CheckpointError(f"shape mismatch for {name!r}")
            tensors[name] = arr
    return tensors, manifest.get("meta", {})
