"""Checkpoint container: named float32 arrays in one file with a text manifest.

Layout: magic ``ASCK``, a little-endian u32 manifest length, the UTF-8
manifest, then the raw payload.  Each manifest line is
``name dim0xdim1x... offset`` with the offset relative to the payload start.
Arrays are written sorted by name so identical contents produce identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CONTAINER_MAGIC = b"ASCK"


class ContainerError(Exception):
    """Raised for malformed or truncated container files."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    manifest_lines = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: container arrays must be float32, got {arr.dtype}")
        if " " in name or "\n" in name:
            raise ValueError(f"array name may not contain spaces or newlines: {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "1"
        manifest_lines.append(f"{name} {shape} {offset}")
        chunks.append(data)
        offset += len(data)
    manifest = ("\n".join(manifest_lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for chunk in chunks:
            f.write(chunk)


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: expected magic {CONTAINER_MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise ContainerError(f"{path}: truncated header")
    (manifest_len,) = struct.unpack_from("<I", data, 4)
    manifest_end = 8 + manifest_len
    if len(data) < manifest_end:
        raise ContainerError(f"{path}: truncated manifest")
    manifest = data[8:manifest_end].decode("utf-8")
    payload = data[manifest_end:]

    arrays: dict[str, np.ndarray] = {}
    for line in manifest.splitlines():
        if not line:
            continue
        try:
            name, shape_s, offset_s = line.split(" ")
            shape = tuple(int(d) for d in shape_s.split("x"))
            offset = int(offset_s)
        except ValueError as e:
            raise ContainerError(f"{path}: bad manifest line {line!r}") from e
        count = int(np.prod(shape))
        end = offset + count * 4
        if end > len(payload):
            raise ContainerError(f"{path}: payload truncated for array {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays[name] = arr.copy()
    return arrays
