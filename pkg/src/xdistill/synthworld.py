"""Procedural driving-like scenes, a ray-cast LiDAR and a prototype teacher.

A scene is a ground plane (class 0) plus a handful of boxes and spheres with
class-specific shapes. The LiDAR casts an azimuth x elevation ray grid from
a sensor mounted above the ego origin. The "teacher" stands in for a frozen
image backbone: each patch of each camera gets the unit-normalised prototype
of the class that dominates the patch, plus Gaussian semantic noise.

Point clouds are expressed in the ego (LiDAR) frame, whose origin sits on
the ground below the sensor, so ``z`` is height above ground.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .geometry import (CalibratedCamera, PointCloud, apply_transform, look_extrinsics,
                       make_transform, pinhole, rigid_inverse, yaw_matrix)

GROUND = 0
BACKGROUND = -1


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    num_classes: int = 5  # ground + object classes
    num_objects: int = 7
    ground_noise: float = 0.01
    min_radius: float = 4.0
    max_radius: float = 16.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SceneConfigError("num_classes must be >= 2")
        if self.num_objects < 1:
            raise SceneConfigError("num_objects must be >= 1")
        if self.ground_noise < 0 or not 0 < self.min_radius < self.max_radius:
            raise SceneConfigError("invalid ground noise or placement radii")


@dataclass
class RaysConfig:
    num_azimuth: int = 64
    num_elevation: int = 16
    min_elevation_deg: float = -25.0
    max_elevation_deg: float = 3.0
    max_range: float = 30.0
    sensor_height: float = 1.8
    intensity_noise: float = 0.03

    def directions(self) -> np.ndarray:
        az = np.arange(self.num_azimuth) * (2 * np.pi / self.num_azimuth)
        el = np.deg2rad(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.num_elevation))
        A, E = np.meshgrid(az, el, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass
class CameraRigConfig:
    image_height: int = 64
    image_width: int = 64
    patch_stride: int = 4
    fov_deg: float = 90.0
    # (x, y, z, yaw_deg) mounts in the ego frame: front and left
    mounts: tuple = ((0.1, 0.0, 1.75, 0.0), (0.0, 0.1, 1.75, 90.0))

    def cameras(self) -> list[CalibratedCamera]:
        f = (self.image_width / 2) / np.tan(np.deg2rad(self.fov_deg) / 2)
        K = pinhole(f, self.image_height, self.image_width)
        return [CalibratedCamera(K, look_extrinsics((x, y, z), np.deg2rad(yaw)),
                                 (self.image_height, self.image_width), self.patch_stride)
                for x, y, z, yaw in self.mounts]


@dataclass
class FeatureConfig:
    dim: int = 16
    sigma: float = 0.1
    prototype_seed: int = 1234
    max_range: float = 60.0

    def prototypes(self, num_classes: int) -> np.ndarray:
        """(num_classes + 1, dim) unit rows; the last row is the background prototype."""
        rng = np.random.default_rng(self.prototype_seed)
        n = num_classes + 1
        G = rng.standard_normal((self.dim, n))
        if n <= self.dim:
            Q, _ = np.linalg.qr(G)
            return np.ascontiguousarray(Q[:, :n].T)
        return G.T / np.linalg.norm(G.T, axis=1, keepdims=True)


@dataclass
class DatasetConfig:
    seed: int = 0
    num_frames: int = 160
    frames_per_scene: int = 4
    val_fraction: float = 0.25
    pose_step: float = 0.05
    scene: SceneConfig = field(default_factory=SceneConfig)
    rays: RaysConfig = field(default_factory=RaysConfig)
    camera: CameraRigConfig = field(default_factory=CameraRigConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        cam = dict(d.pop("camera", {}))
        if "mounts" in cam:
            cam["mounts"] = tuple(tuple(m) for m in cam["mounts"])
        return cls(scene=SceneConfig(**d.pop("scene", {})), rays=RaysConfig(**d.pop("rays", {})),
                   camera=CameraRigConfig(**cam), feature=FeatureConfig(**d.pop("feature", {})), **d)


@dataclass
class SceneObject:
    kind: str  # "box" or "sphere"
    center: np.ndarray
    size: np.ndarray  # box: full extents (l, w, h); sphere: (r, r, r)
    yaw: float
    class_id: int


@dataclass
class Scene:
    objects: list[SceneObject]
    num_classes: int
    ground_noise: float
    seed: int


@dataclass(eq=False)
class Frame:
    cloud: PointCloud
    cameras: list[CalibratedCamera]
    teacher: list[np.ndarray]  # per camera (H/S, W/S, D_v)
    pose: np.ndarray  # ego -> world
    frame_id: int
    split: str = "train"
    scene_id: int = 0

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.cloud == other.cloud and self.cameras == other.cameras
                and len(self.teacher) == len(other.teacher)
                and all(np.array_equal(a, b) for a, b in zip(self.teacher, other.teacher))
                and np.array_equal(self.pose, other.pose) and self.frame_id == other.frame_id
                and self.split == other.split and self.scene_id == other.scene_id)


# ------------------------------------------------------------------ scenes

def _object_shape(class_id: int, rng: np.random.Generator):
    # shapes cycle through four archetypes so geometry correlates with class
    archetype = (class_id - 1) % 4
    grow = 1.0 + 0.25 * ((class_id - 1) // 4)
    if archetype == 0:  # car-like box
        return "box", np.array([rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.3, 1.7)]) * grow
    if archetype == 1:  # pole
        return "box", np.array([rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(2.5, 4.0)]) * grow
    if archetype == 2:  # bush / round
        r = rng.uniform(0.7, 1.3) * grow
        return "sphere", np.array([r, r, r])
    return "box", np.array([rng.uniform(4.0, 8.0), rng.uniform(0.6, 1.2), rng.uniform(2.5, 4.0)]) * grow


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng([seed, 7])
    objects = []
    for _ in range(config.num_objects):
        cls = int(rng.integers(1, config.num_classes))
        kind, size = _object_shape(cls, rng)
        radius = rng.uniform(config.min_radius, config.max_radius)
        az = rng.uniform(0, 2 * np.pi)
        z = size[2] / 2 if kind == "box" else size[0] * rng.uniform(1.0, 1.3)
        center = np.array([radius * np.cos(az), radius * np.sin(az), z])
        objects.append(SceneObject(kind, center, size, float(rng.uniform(0, np.pi)), cls))
    return Scene(objects, config.num_classes, config.ground_noise, seed)


# ------------------------------------------------------------------ ray casting

def _ray_box(o, d, obj: SceneObject) -> np.ndarray:
    R = yaw_matrix(obj.yaw)
    lo = (o - obj.center) @ R  # into the box frame
    ld = d @ R
    half = obj.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-half - lo) * inv
        t2 = (half - lo) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _ray_sphere(o, d, obj: SceneObject) -> np.ndarray:
    r = obj.size[0]
    oc = o - obj.center
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    hit = (disc >= 0) & (t > 1e-9)
    return np.where(hit, t, np.inf)


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """Nearest hit per ray. Returns (t, class_id); misses get (inf, BACKGROUND).

    ``dirs`` must be unit vectors; ``t`` is then the range in meters.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    cls = np.full(n, BACKGROUND, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < 0, -origins[:, 2] / dirs[:, 2], np.inf)
    tg = np.where(tg > 1e-9, tg, np.inf)
    better = tg < best
    best[better], cls[better] = tg[better], GROUND
    for obj in scene.objects:
        t = _ray_box(origins, dirs, obj) if obj.kind == "box" else _ray_sphere(origins, dirs, obj)
        better = t < best
        best[better], cls[better] = t[better], obj.class_id
    miss = best > max_range
    best[miss], cls[miss] = np.inf, BACKGROUND
    return best, cls


def class_intensity(class_id, num_classes: int):
    return 0.2 * np.asarray(class_id) / num_classes + 0.1


def simulate_lidar(scene: Scene, pose: np.ndarray, rays: RaysConfig | None = None,
                   rng: np.random.Generator | None = None, directions: np.ndarray | None = None) -> PointCloud:
    """Ray-cast one sweep. ``directions`` overrides the configured grid (ego frame, unit)."""
    rays = rays or RaysConfig()
    rng = rng or np.random.default_rng(0)
    d_ego = rays.directions() if directions is None else np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    origin_ego = np.array([0.0, 0.0, rays.sensor_height])
    origin_w = apply_transform(pose, origin_ego[None])[0]
    d_w = d_ego @ pose[:3, :3].T
    t, cls = cast_rays(scene, origin_w, d_w, rays.max_range)
    keep = np.isfinite(t)
    hits_w = origin_w + d_w[keep] * t[keep, None]
    labels = cls[keep]
    ground = labels == GROUND
    if scene.ground_noise > 0 and ground.any():
        hits_w[ground, 2] += rng.normal(0.0, scene.ground_noise, ground.sum())
    hits = apply_transform(rigid_inverse(pose), hits_w)
    inten = class_intensity(labels, scene.num_classes)
    if rays.intensity_noise > 0:
        inten = inten + rng.normal(0.0, rays.intensity_noise, inten.shape)
    inten = np.clip(inten, 0.0, 1.0)
    return PointCloud(np.column_stack([hits, inten]), labels, origin_ego)


# ------------------------------------------------------------------ teacher

def patch_classes(scene: Scene, cam: CalibratedCamera, pose: np.ndarray, max_range: float) -> np.ndarray:
    """Dominant class per patch (BACKGROUND where empty space wins the vote)."""
    H, W = cam.image_size
    S = cam.patch_stride
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(H * W)], axis=1)
    rays_cam = pix @ np.linalg.inv(cam.intrinsics).T
    rays_cam /= np.linalg.norm(rays_cam, axis=1, keepdims=True)
    cam_to_world = pose @ rigid_inverse(cam.extrinsics)
    origin = cam_to_world[:3, 3]
    dirs = rays_cam @ cam_to_world[:3, :3].T
    _, cls = cast_rays(scene, origin, dirs, max_range)
    votes = cls.reshape(H // S, S, W // S, S).transpose(0, 2, 1, 3).reshape(H // S, W // S, S * S)
    # categories: 0 = background, 1.. = class id + 1; argmax ties go to the lower category
    counts = np.stack([(votes == c).sum(axis=-1) for c in range(BACKGROUND, scene.num_classes)], axis=-1)
    return counts.argmax(axis=-1) - 1


def render_teacher(scene: Scene, cam: CalibratedCamera, pose: np.ndarray, feature: FeatureConfig | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    feature = feature or FeatureConfig()
    rng = rng or np.random.default_rng(0)
    protos = feature.prototypes(scene.num_classes)
    cls = patch_classes(scene, cam, pose, feature.max_range)
    feats = protos[np.where(cls == BACKGROUND, scene.num_classes, cls)]
    if feature.sigma > 0:
        feats = feats + feature.sigma * rng.standard_normal(feats.shape)
    return feats / np.linalg.norm(feats, axis=-1, keepdims=True)


# ------------------------------------------------------------------ frames

def frame_pose(config: DatasetConfig, index_in_scene: int) -> np.ndarray:
    return make_transform(t=[config.pose_step * index_in_scene, 0.0, 0.0])


def generate_frame(config: DatasetConfig, frame_id: int, scene: Optional[Scene] = None) -> Frame:
    """Frame ``frame_id`` of the dataset; a pure function of (config, frame_id)."""
    scene_id, j = divmod(frame_id, config.frames_per_scene)
    if scene is None:
        scene = generate_scene(config.seed * 100_003 + scene_id, config.scene)
    n_scenes = -(-config.num_frames // config.frames_per_scene)
    n_val = int(round(config.val_fraction * n_scenes))
    split = "val" if scene_id >= n_scenes - n_val else "train"
    pose = frame_pose(config, j)
    rng = np.random.default_rng([config.seed, frame_id, 11])
    cloud = simulate_lidar(scene, pose, config.rays, rng)
    cams = config.camera.cameras()
    teacher = [render_teacher(scene, cam, pose, config.feature, np.random.default_rng([config.seed, frame_id, 13, k]))
               for k, cam in enumerate(cams)]
    return Frame(cloud, cams, teacher, pose, frame_id, split, scene_id)


def generate_dataset(config: DatasetConfig | None = None):
    """Yield every frame in id order (streamed; one scene cached at a time)."""
    config = config or DatasetConfig()
    if config.num_frames < 1:
        raise SceneConfigError("num_frames must be >= 1")
    config.scene.validate()
    scene, scene_id = None, -1
    for fid in range(config.num_frames):
        sid = fid // config.frames_per_scene
        if sid != scene_id:
            scene = generate_scene(config.seed * 100_003 + sid, config.scene)
            scene_id = sid
        yield generate_frame(config, fid, scene)
