"""Occupancy query generation, ground removal and temporal overlap pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, apply_transform

FRONT, BEHIND, SIGHT = 0, 1, 2
KIND_LABEL = np.array([0.0, 1.0, 0.0])  # front empty, behind occupied, sight empty


@dataclass
class QueryConfig:
    delta: float = 0.1
    t_min: float = 0.05
    t_margin: float = 0.1
    point_fraction: float = 0.25  # share of surface points that spawn queries


@dataclass
class OccupancyQuerySet:
    queries: np.ndarray  # (Q, 3)
    occupancy_label: np.ndarray  # (Q,)
    intensity_target: np.ndarray  # (Q,), 0 where not occupied
    parent_index: np.ndarray  # (Q,)
    kind: np.ndarray  # (Q,)
    skipped: int = 0

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @classmethod
    def empty(cls) -> "OccupancyQuerySet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, sets: list["OccupancyQuerySet"]) -> "OccupancyQuerySet":
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.queries for s in sets]),
                   np.concatenate([s.occupancy_label for s in sets]),
                   np.concatenate([s.intensity_target for s in sets]),
                   np.concatenate([s.parent_index for s in sets]),
                   np.concatenate([s.kind for s in sets]),
                   sum(s.skipped for s in sets))


def generate_queries(pc: PointCloud, delta: float = 0.1, rng: np.random.Generator | None = None,
                     t_min: float = 0.05, t_margin: float = 0.1, index_offset: int = 0,
                     point_fraction: float = 1.0) -> OccupancyQuerySet:
    """Three queries per surface point: just in front, just behind, somewhere on the line of sight.

    Points closer than ``delta`` to the sensor are skipped and counted. With
    ``point_fraction < 1`` a uniform subset of the points spawns queries.
    Layout is [front block, behind block, sight block].
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0 < point_fraction <= 1:
        raise ValueError("point_fraction must lie in (0, 1]")
    rng = rng or np.random.default_rng(0)
    xyz = pc.xyz
    ray = xyz - pc.sensor_origin
    dist = np.linalg.norm(ray, axis=1)
    ok = dist >= delta
    idx = np.flatnonzero(ok)
    if point_fraction < 1 and len(idx):
        m = max(1, int(round(point_fraction * len(idx))))
        idx = np.sort(rng.choice(idx, m, replace=False))
    p, r, d = xyz[idx], ray[idx], dist[idx]
    unit = r / d[:, None]
    front = p - delta * unit
    behind = p + delta * unit
    t = rng.uniform(t_min, 1.0 - t_margin, len(idx))
    sight = pc.sensor_origin + t[:, None] * r
    n = len(idx)
    kind = np.repeat([FRONT, BEHIND, SIGHT], n)
    inten = np.zeros(3 * n)
    inten[n:2 * n] = pc.intensity[idx]
    return OccupancyQuerySet(np.concatenate([front, behind, sight]), KIND_LABEL[kind], inten,
                             np.tile(idx, 3) + index_offset, kind, int((~ok).sum()))


def remove_ground(pc: PointCloud, z_threshold: float = 0.2, return_index: bool = False):
    keep = np.flatnonzero(pc.xyz[:, 2] >= z_threshold)
    out = pc.subset(keep)
    return (out, keep) if return_index else out


@dataclass
class TemporalPairSet:
    pairs: np.ndarray  # (P, 2) indices into the ORIGINAL clouds of frame A and B
    frames: tuple[int, int]
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)


def match_points(xyz_a: np.ndarray, xyz_b: np.ndarray, r_match: float):
    """One-to-one greedy nearest matching within ``r_match``.

    Candidate pairs are accepted in order of (distance, index_a, index_b), so
    the result does not depend on which cloud is called A.
    """
    if len(xyz_a) == 0 or len(xyz_b) == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    tree_b = cKDTree(xyz_b)
    cand = []
    for ia, nbrs in enumerate(cKDTree(xyz_a).query_ball_tree(tree_b, r_match)):
        for ib in nbrs:
            cand.append((ia, ib))
    if not cand:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    cand = np.array(cand, dtype=np.int64)
    dist = np.linalg.norm(xyz_a[cand[:, 0]] - xyz_b[cand[:, 1]], axis=1)
    order = np.lexsort((cand[:, 1], cand[:, 0], dist))
    used_a = np.zeros(len(xyz_a), bool)
    used_b = np.zeros(len(xyz_b), bool)
    keep = []
    for k in order:
        ia, ib = cand[k]
        if not used_a[ia] and not used_b[ib]:
            used_a[ia] = used_b[ib] = True
            keep.append(k)
    keep = np.array(sorted(keep, key=lambda k: (cand[k, 0], cand[k, 1])), dtype=np.int64)
    return cand[keep], dist[keep]


def temporal_pairs(frame_a, frame_b, r_match: float = 0.1, z_threshold: float = 0.2) -> TemporalPairSet:
    """Overlapping non-ground points of two frames in the shared world frame."""
    if frame_a.pose is None or frame_b.pose is None:
        raise ValueError("temporal_pairs needs world poses on both frames")
    ga, ia = remove_ground(frame_a.cloud, z_threshold, return_index=True)
    gb, ib = remove_ground(frame_b.cloud, z_threshold, return_index=True)
    wa = apply_transform(frame_a.pose, ga.xyz)
    wb = apply_transform(frame_b.pose, gb.xyz)
    local, dist = match_points(wa, wb, r_match)
    pairs = np.column_stack([ia[local[:, 0]], ib[local[:, 1]]]) if len(local) else np.zeros((0, 2), np.int64)
    return TemporalPairSet(pairs, (frame_a.frame_id, frame_b.frame_id), dist)
