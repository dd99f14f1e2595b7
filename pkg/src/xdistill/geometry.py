"""Rigid transforms, pinhole projection and point-to-patch correspondences.

Camera frame convention: x right, y down, z forward (optical axis). Pixel
coordinates live in the half-open box [0, W) x [0, H).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

DEPTH_EPS = 1e-6


class GeometryError(ValueError):
    pass


def is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    return (np.allclose(R @ R.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.allclose(T[3], [0, 0, 0, 1], atol=0))


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def make_transform(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CalibratedCamera:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 4x4, LiDAR frame -> camera frame
    image_size: tuple[int, int]  # (H, W)
    patch_stride: int

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64)
        T = np.array(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0 or not np.allclose(K[1:, 0], 0) \
                or K[2, 1] != 0 or not np.array_equal(K[2], [0, 0, 1]):
            raise GeometryError("intrinsics must be upper triangular with positive focals and last row (0,0,1)")
        if not is_rigid(T):
            raise GeometryError("extrinsics must be a rigid transform")
        H, W = self.image_size
        S = self.patch_stride
        if S <= 0 or H % S or W % S:
            raise GeometryError(f"image size {self.image_size} not divisible by stride {S}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        H, W = self.image_size
        return H // self.patch_stride, W // self.patch_stride

    def __eq__(self, other):
        return (isinstance(other, CalibratedCamera)
                and np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.extrinsics, other.extrinsics)
                and self.image_size == other.image_size
                and self.patch_stride == other.patch_stride)


def pinhole(f: float, H: int, W: int, cx: float | None = None, cy: float | None = None) -> np.ndarray:
    return np.array([[f, 0.0, W / 2 if cx is None else cx],
                     [0.0, f, H / 2 if cy is None else cy],
                     [0.0, 0.0, 1.0]])


def look_extrinsics(position, yaw: float) -> np.ndarray:
    """LiDAR->camera transform for a level camera at ``position`` facing ``yaw``.

    yaw = 0 looks along +x of the LiDAR frame, yaw = pi/2 along +y.
    """
    fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R_cl = np.stack([right, down, fwd])  # rows: camera axes in LiDAR coords
    return make_transform(R_cl, -R_cl @ np.asarray(position, dtype=np.float64))


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    labels: Optional[np.ndarray] = None
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise GeometryError("labels length differs from point count")

    def validate(self) -> None:
        if self.num_points < 1:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("non-finite point coordinates")
        inten = self.points[:, 3]
        if inten.min() < 0 or inten.max() > 1:
            raise GeometryError("intensity outside [0, 1]")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(self.points[index], None if self.labels is None else self.labels[index],
                          self.sensor_origin.copy())

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels))
        return (same_labels and np.array_equal(self.points, other.points)
                and np.array_equal(self.sensor_origin, other.sensor_origin))


class PixelCorrespondence(NamedTuple):
    point_index: int
    pixel: tuple[float, float]
    patch: tuple[int, int]
    camera_index: int


def apply_transform(T: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz @ T[:3, :3].T + T[:3, 3]


def project_points(xyz: np.ndarray, cam: CalibratedCamera):
    """Vectorised projection. Returns (uv (N,2), depth (N,), visible mask (N,))."""
    pc = apply_transform(cam.extrinsics, np.atleast_2d(xyz))
    z = pc[:, 2]
    front = z > DEPTH_EPS
    safe_z = np.where(front, z, 1.0)
    uvw = pc @ cam.intrinsics.T
    uv = uvw[:, :2] / safe_z[:, None]
    H, W = cam.image_size
    visible = front & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    return uv, z, visible


def project_point(p, cam: CalibratedCamera) -> Optional[tuple[float, float, float]]:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise GeometryError("point must be finite")
    uv, z, vis = project_points(p[None], cam)
    if not vis[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject(u: float, v: float, depth: float, cam: CalibratedCamera) -> np.ndarray:
    ray = np.linalg.solve(cam.intrinsics, np.array([u, v, 1.0]))
    pc = ray * depth
    return apply_transform(rigid_inverse(cam.extrinsics), pc[None])[0]


def pixel_to_patch(uv: np.ndarray, stride: int) -> np.ndarray:
    """(row, col) patch indices, floor division of (v, u) by the stride."""
    uv = np.asarray(uv)
    return np.stack([np.floor(uv[..., 1] / stride), np.floor(uv[..., 0] / stride)], axis=-1).astype(np.int64)


def camera_correspondences(xyz: np.ndarray, cam: CalibratedCamera):
    """Arrays form used by training: (point_index, uv, patch_rc) for one camera."""
    uv, _, vis = project_points(xyz, cam)
    idx = np.flatnonzero(vis)
    uv = uv[idx]
    patch = pixel_to_patch(uv, cam.patch_stride)
    gh, gw = cam.grid_shape
    # guard against float rounding at the last pixel column
    np.clip(patch[:, 0], 0, gh - 1, out=patch[:, 0])
    np.clip(patch[:, 1], 0, gw - 1, out=patch[:, 1])
    return idx, uv, patch


def build_correspondences(pc: PointCloud, cams: Sequence[CalibratedCamera]) -> list[PixelCorrespondence]:
    if len(cams) < 1:
        raise GeometryError("at least one camera is required")
    out: list[PixelCorrespondence] = []
    for ci, cam in enumerate(cams):
        idx, uv, patch = camera_correspondences(pc.xyz, cam)
        for i, (u, v), (r, c) in zip(idx, uv, patch):
            out.append(PixelCorrespondence(int(i), (float(u), float(v)), (int(r), int(c)), ci))
    return out


def transform_cloud(pc: PointCloud, T: np.ndarray) -> PointCloud:
    T = np.asarray(T, dtype=np.float64)
    if not is_rigid(T):
        raise GeometryError("transform_cloud requires a rigid transform")
    pts = pc.points.copy()
    pts[:, :3] = apply_transform(T, pc.xyz)
    return replace(pc, points=pts,
                   labels=None if pc.labels is None else pc.labels.copy(),
                   sensor_origin=apply_transform(T, pc.sensor_origin[None])[0])
