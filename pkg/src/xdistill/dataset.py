"""Versioned binary dataset format (``CDSF``) with a JSON config sidecar.

Layout, little-endian::

    b"CDSF" | u32 version | u32 frame_count
    per frame: u32 frame_id, then four blocks (cloud, cameras, teacher, pose),
               each block = u32 payload_length | payload | u32 crc32(payload)

All floats are float64. Frames are read one at a time, so memory use is
bounded by the largest frame rather than the file.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .geometry import CalibratedCamera, PointCloud
from .synthworld import Frame

MAGIC = b"CDSF"
VERSION = 1
SPLITS = ("train", "val")


class DatasetError(IOError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ChecksumError(DatasetError):
    def __init__(self, frame_id: int, block: str):
        super().__init__(f"checksum failure in frame {frame_id} ({block} block)")
        self.frame_id = frame_id
        self.block = block


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _encode_cloud(pc: PointCloud) -> bytes:
    has_labels = pc.labels is not None
    parts = [struct.pack("<IB", pc.num_points, int(has_labels)), _f64(pc.points)]
    if has_labels:
        parts.append(np.ascontiguousarray(pc.labels, dtype="<i8").tobytes())
    parts.append(_f64(pc.sensor_origin))
    return b"".join(parts)


def _encode_cameras(cams) -> bytes:
    parts = [struct.pack("<I", len(cams))]
    for c in cams:
        parts += [_f64(c.intrinsics), _f64(c.extrinsics), struct.pack("<III", *c.image_size, c.patch_stride)]
    return b"".join(parts)


def _encode_teacher(maps) -> bytes:
    parts = [struct.pack("<I", len(maps))]
    for m in maps:
        parts += [struct.pack("<III", *m.shape), _f64(m)]
    return b"".join(parts)


def _encode_pose(frame: Frame) -> bytes:
    return _f64(frame.pose) + struct.pack("<IIB", frame.frame_id, frame.scene_id, SPLITS.index(frame.split))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError("block payload shorter than declared")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def _decode_cloud(buf: bytes) -> PointCloud:
    r = _Reader(buf)
    n, has_labels = r.unpack("<IB")
    pts = r.f64(n, 4)
    labels = np.frombuffer(r.take(8 * n), dtype="<i8").astype(np.int64) if has_labels else None
    return PointCloud(pts, labels, r.f64(3))


def _decode_cameras(buf: bytes) -> list[CalibratedCamera]:
    r = _Reader(buf)
    (m,) = r.unpack("<I")
    cams = []
    for _ in range(m):
        K, T = r.f64(3, 3), r.f64(4, 4)
        h, w, s = r.unpack("<III")
        cams.append(CalibratedCamera(K, T, (h, w), s))
    return cams


def _decode_teacher(buf: bytes) -> list[np.ndarray]:
    r = _Reader(buf)
    (m,) = r.unpack("<I")
    return [r.f64(*r.unpack("<III")) for _ in range(m)]


def _write_block(fh: BinaryIO, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedError(f"unexpected end of file (wanted {n} bytes, got {len(data)})")
    return data


def _read_block(fh: BinaryIO, frame_id: int, name: str) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    payload = _read_exact(fh, n)
    (crc,) = struct.unpack("<I", _read_exact(fh, 4))
    if zlib.crc32(payload) != crc:
        raise ChecksumError(frame_id, name)
    return payload


def write_dataset(frames: Iterable[Frame], path, config: dict | None = None) -> Path:
    """Write frames; accepts any iterable so generation can stream into the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, 0))
        for fr in frames:
            fh.write(struct.pack("<I", fr.frame_id))
            for payload in (_encode_cloud(fr.cloud), _encode_cameras(fr.cameras),
                            _encode_teacher(fr.teacher), _encode_pose(fr)):
                _write_block(fh, payload)
            count += 1
        if count:
            fh.seek(8)
            fh.write(struct.pack("<I", count))
    if count == 0:
        path.unlink()
        raise DatasetError("refusing to write an empty dataset")
    if config is not None:
        sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True))
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def iter_dataset(path) -> Iterator[Frame]:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise DatasetError(f"{path}: not a CDSF dataset")
        version, count = struct.unpack("<II", head[4:])
        if version != VERSION:
            raise VersionError(f"{path}: format version {version}, expected {VERSION}")
        for _ in range(count):
            (fid,) = struct.unpack("<I", _read_exact(fh, 4))
            cloud = _decode_cloud(_read_block(fh, fid, "cloud"))
            cams = _decode_cameras(_read_block(fh, fid, "cameras"))
            teacher = _decode_teacher(_read_block(fh, fid, "teacher"))
            pr = _Reader(_read_block(fh, fid, "pose"))
            pose = pr.f64(4, 4)
            frame_id, scene_id, split = pr.unpack("<IIB")
            yield Frame(cloud, cams, teacher, pose, frame_id, SPLITS[split], scene_id)


def read_dataset(path) -> list[Frame]:
    return list(iter_dataset(path))


def read_config(path) -> dict | None:
    side = sidecar_path(path)
    return json.loads(side.read_text()) if side.exists() else None


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
