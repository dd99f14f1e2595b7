"""Training samples, point-cloud augmentations, Mix3D and voxel downsampling.

A :class:`Sample` is what the student trains on: augmented points plus the
bookkeeping needed by the losses. Distillation pairs are resolved against the
ORIGINAL geometry when the sample is built, so augmentations only move
points; indices stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, camera_correspondences, yaw_matrix


@dataclass
class AugmentConfig:
    rotate: float = np.pi  # max |yaw| in radians
    scale: tuple[float, float] = (0.9, 1.1)
    flip: tuple[float, float, float] = (0.5, 0.5, 0.0)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    mix3d_prob: float = 0.8
    grid_size: float = 0.05

    def validate(self) -> None:
        probs = list(self.flip) + [self.mix3d_prob]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError("scale range must be positive and ordered")
        if self.grid_size <= 0:
            raise ValueError("grid_size must be positive")
        if self.rotate < 0 or self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValueError("rotate and jitter magnitudes must be non-negative")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        base = dict(rotate=0.0, scale=(1.0, 1.0), flip=(0.0, 0.0, 0.0), jitter_sigma=0.0, mix3d_prob=0.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class View:
    """Distillation pairs for one camera of one source frame."""
    point_index: np.ndarray  # rows of the sample
    teacher: np.ndarray  # (len(point_index), D_v), frozen


@dataclass
class Segment:
    start: int
    stop: int
    sensor_origin: np.ndarray
    frame_id: int


@dataclass
class Sample:
    points: np.ndarray  # (N, 4), what the student sees
    labels: np.ndarray
    views: list[View] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_frame(cls, frame, grid_size: float | None = None) -> "Sample":
        cloud = frame.cloud
        if grid_size:
            cloud = voxel_downsample(cloud, grid_size)
        views = []
        for cam, tmap in zip(frame.cameras, frame.teacher):
            idx, _, patch = camera_correspondences(cloud.xyz, cam)
            views.append(View(idx, tmap[patch[:, 0], patch[:, 1]]))
        labels = cloud.labels if cloud.labels is not None else np.full(cloud.num_points, -1)
        return cls(cloud.points.copy(), labels.copy(), views,
                   [Segment(0, cloud.num_points, cloud.sensor_origin.copy(), frame.frame_id)])

    def segment_cloud(self, seg: Segment) -> PointCloud:
        return PointCloud(self.points[seg.start:seg.stop], self.labels[seg.start:seg.stop], seg.sensor_origin)


@dataclass
class AugmentRecord:
    linear: np.ndarray  # 3x3 applied to every point (rotation, scale, flip)
    jitter: np.ndarray  # (N, 3) per-point displacement added afterwards

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.linear, np.eye(3)) and not np.any(self.jitter)


def apply_augmentations(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator):
    """RandomRotate (yaw), RandomScale, RandomFlip, RandomJitter.

    Returns ``(augmented sample, AugmentRecord)``. Labels, intensities and view
    indices are untouched.
    """
    n = sample.num_points
    A = np.eye(3)
    if cfg.rotate > 0:
        A = yaw_matrix(rng.uniform(-cfg.rotate, cfg.rotate)) @ A
    lo, hi = cfg.scale
    if (lo, hi) != (1.0, 1.0):
        A = rng.uniform(lo, hi) * A
    flips = np.array([-1.0 if p > 0 and rng.random() < p else 1.0 for p in cfg.flip])
    A = np.diag(flips) @ A
    jitter = np.zeros((n, 3))
    if cfg.jitter_sigma > 0:
        jitter = np.clip(rng.normal(0.0, cfg.jitter_sigma, (n, 3)), -cfg.jitter_clip, cfg.jitter_clip)
    pts = sample.points.copy()
    if not np.array_equal(A, np.eye(3)):
        pts[:, :3] = pts[:, :3] @ A.T
    pts[:, :3] += jitter
    segs = [Segment(s.start, s.stop, A @ s.sensor_origin, s.frame_id) for s in sample.segments]
    out = Sample(pts, sample.labels, sample.views, segs)
    return out, AugmentRecord(A, jitter)


def mix3d(a: Sample, b: Sample) -> Sample:
    """Concatenate two samples into one out-of-context scene."""
    if a.points.shape[1] != b.points.shape[1]:
        raise ValueError("mix3d: point dimensionality differs")
    da = {v.teacher.shape[1] for v in a.views}
    db = {v.teacher.shape[1] for v in b.views}
    if da and db and da != db:
        raise ValueError(f"mix3d: teacher dimensionality differs ({da} vs {db})")
    off = a.num_points
    views = list(a.views) + [View(v.point_index + off, v.teacher) for v in b.views]
    segs = list(a.segments) + [Segment(s.start + off, s.stop + off, s.sensor_origin, s.frame_id) for s in b.segments]
    return Sample(np.concatenate([a.points, b.points]), np.concatenate([a.labels, b.labels]), views, segs)


def maybe_mix3d(a: Sample, b: Sample, prob: float, rng: np.random.Generator) -> tuple[Sample, bool]:
    if prob > 0 and rng.random() < prob:
        return mix3d(a, b), True
    return a, False


def voxel_indices(xyz: np.ndarray, grid_size: float) -> np.ndarray:
    """Indices kept by voxel downsampling, in ascending original order."""
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(xyz / grid_size).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    centers = (keys + 0.5) * grid_size
    dist = np.sum((xyz - centers) ** 2, axis=1)
    order = np.lexsort((np.arange(len(xyz)), dist, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    return np.sort(order[first])


def voxel_downsample(pc: PointCloud, grid_size: float) -> PointCloud:
    """Keep at most one point per voxel: the one nearest the voxel centre, ties to the lowest index."""
    return pc.subset(voxel_indices(pc.xyz, grid_size))
