"""Parameter checkpoints: a flat little-endian record file plus a JSON manifest.

Record layout (repeated): u16 name length, utf-8 name, u8 ndim, ndim x u64
dims, then prod(dims) float64 values. The file starts with ``b"CDCK"`` and a
u32 version; the manifest sits next to it as ``<stem>.json``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CDCK"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8", order="C")  # ascontiguousarray would promote 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes())
    body = b"".join(chunks)
    path.write_bytes(body)
    meta = dict(manifest or {})
    meta["records"] = {name: list(np.shape(arrays[name])) for name in sorted(arrays)}
    meta["crc32"] = zlib.crc32(body)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    body = path.read_bytes()
    manifest_path = path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if "crc32" in manifest and manifest["crc32"] != zlib.crc32(body):
        raise CheckpointError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return arrays, manifest
