"""Binary array format shared by datasets and checkpoints.

Layout per array: u32 rank, u32 per dimension (little-endian), then the raw
row-major float payload (32- or 64-bit little-endian). Containers record the
dtype per entry; a standalone single-array file infers it from the byte count.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAX_RANK = 8


class FormatError(ValueError):
    """Corrupt or inconsistent serialized data; message carries the offset."""


def write_array(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise ValueError(f"array format stores float32/float64, got {arr.dtype}")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(f, dtype) -> np.ndarray:
    offset = f.tell()
    head = f.read(4)
    if len(head) < 4:
        raise FormatError(f"truncated array header at byte {offset}")
    (rank,) = struct.unpack("<I", head)
    if rank > MAX_RANK:
        raise FormatError(f"implausible rank {rank} at byte {offset}")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise FormatError(f"truncated dims at byte {offset + 4}")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    dtype = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"truncated payload at byte {offset + 4 + 4 * rank}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_array(f, arr)


def load_array(path) -> np.ndarray:
    """Read a single-array file, inferring 32 vs 64-bit from the byte count."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError("truncated array header at byte 0")
    (rank,) = struct.unpack("<I", data[:4])
    if rank > MAX_RANK:
        raise FormatError("implausible rank at byte 0")
    shape = struct.unpack(f"<{rank}I", data[4 : 4 + 4 * rank])
    count = int(np.prod(shape)) if rank else 1
    payload = data[4 + 4 * rank :]
    if count and len(payload) % count == 0 and len(payload) // count in (4, 8):
        itemsize = len(payload) // count
    else:
        raise FormatError(f"payload of {len(payload)} bytes does not match shape {shape}")
    dtype = np.dtype(f"<f{itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_state(path, named_arrays, extra_manifest: dict | None = None) -> None:
    """Checkpoint container: u32 manifest length, JSON manifest, array blob."""
    entries = []
    blobs = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(getattr(arr, "data", arr))  # Tensor or ndarray
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(arr)
    manifest = {"format": "slimfuse-state-v1", "entries": entries}
    if extra_manifest:
        manifest["extra"] = extra_manifest
    payload = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for arr in blobs:
            write_array(f, arr)


def load_state(path):
    """Returns (dict name -> array, extra manifest dict)."""
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise FormatError("truncated state header at byte 0")
        (mlen,) = struct.unpack("<I", head)
        manifest = json.loads(f.read(mlen).decode())
        if manifest.get("format") != "slimfuse-state-v1":
            raise FormatError("unknown state format")
        arrays = {}
        for entry in manifest["entries"]:
            arr = read_array(f, entry["dtype"])
            if list(arr.shape) != entry["shape"]:
                raise FormatError(
                    f"shape mismatch for {entry['name']}: "
                    f"manifest {entry['shape']}, payload {list(arr.shape)}"
                )
            arrays[entry["name"]] = arr
    return arrays, manifest.get("extra", {})
