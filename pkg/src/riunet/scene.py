"""Procedural labeled LiDAR scans for desk-scale experiments.

A scene is a flat ground plane plus cars (oriented boxes), pedestrians
(vertical cylinders) and cyclists (a narrow box with a cylinder rider). One
ray is cast through every pixel centre of a :class:`ProjectionConfig`; each
ray returns its nearest hit, rays that hit nothing within ``max_range``
return no point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np

from .projection import PointCloud, ProjectionConfig

BACKGROUND, CAR, PEDESTRIAN, CYCLIST = 0, 1, 2, 3
CLASS_NAMES = ("background", "car", "pedestrian", "cyclist")


@dataclass(frozen=True)
class Box:
    """Box resting on its base, rotated by ``yaw`` around the vertical axis."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]  # length (local x), width (local y), height
    yaw: float
    label: int

    def bounds(self):
        half = np.asarray(self.size) / 2.0
        return -half, half


@dataclass(frozen=True)
class Cylinder:
    """Vertical capped cylinder spanning ``z0 <= z <= z1``."""

    center_xy: Tuple[float, float]
    radius: float
    z0: float
    z1: float
    label: int


Shape = Union[Box, Cylinder]


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    cars: Tuple[int, int] = (2, 5)
    pedestrians: Tuple[int, int] = (1, 4)
    cyclists: Tuple[int, int] = (1, 3)
    car_size: Tuple[Tuple[float, float], ...] = ((3.6, 4.8), (1.6, 2.0), (1.4, 1.8))
    pedestrian_radius: Tuple[float, float] = (0.25, 0.4)
    pedestrian_height: Tuple[float, float] = (1.55, 1.95)
    cyclist_length: Tuple[float, float] = (1.6, 1.9)
    ground_z: float = -1.73
    range_band: Tuple[float, float] = (2.0, 70.0)
    spawn_range: Tuple[float, float] = (5.0, 35.0)
    max_range: float = 80.0
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)

    def __post_init__(self):
        lo, hi = self.range_band
        if not (0 < lo <= self.spawn_range[0] <= self.spawn_range[1] <= hi):
            raise ValueError(f"spawn range {self.spawn_range} must lie inside the range band {self.range_band}")
        for name in ("cars", "pedestrians", "cyclists"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise ValueError(f"{name} count range {a, b} is invalid")


def sample_objects(spec: SceneSpec) -> List[Shape]:
    rng = np.random.default_rng(spec.seed)
    cfg = spec.projection
    margin = math.radians(3.0)
    objects: List[Shape] = []

    def place():
        r = rng.uniform(*spec.spawn_range)
        az = rng.uniform(cfg.theta_min + margin, cfg.theta_max - margin)
        return r * math.cos(az), r * math.sin(az)

    g = spec.ground_z
    for _ in range(rng.integers(spec.cars[0], spec.cars[1] + 1)):
        x, y = place()
        length, width, height = (rng.uniform(*bounds) for bounds in spec.car_size)
        objects.append(Box((x, y, g + height / 2), (length, width, height), rng.uniform(-math.pi, math.pi), CAR))
    for _ in range(rng.integers(spec.pedestrians[0], spec.pedestrians[1] + 1)):
        x, y = place()
        objects.append(Cylinder((x, y), rng.uniform(*spec.pedestrian_radius), g, g + rng.uniform(*spec.pedestrian_height), PEDESTRIAN))
    for _ in range(rng.integers(spec.cyclists[0], spec.cyclists[1] + 1)):
        x, y = place()
        yaw = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(*spec.cyclist_length)
        objects.append(Box((x, y, g + 0.5), (length, 0.45, 1.0), yaw, CYCLIST))
        objects.append(Cylinder((x, y), 0.28, g + 0.9, g + 1.8, CYCLIST))
    return objects


def intersect_box(dirs: np.ndarray, box: Box) -> np.ndarray:
    """Ray parameter of the first hit for rays from the origin (inf = miss)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> local
    origin = rot @ -np.asarray(box.center, dtype=np.float64)
    d = dirs @ rot.T
    lo, hi = box.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / d
        t2 = (hi - origin) / d
    # parallel components: inside the slab -> unbounded, outside -> miss
    parallel = d == 0
    inside = (origin >= lo) & (origin <= hi)
    t_near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2)).max(axis=-1)
    t_far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2)).min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit, t, np.inf)


def intersect_cylinder(dirs: np.ndarray, cyl: Cylinder) -> np.ndarray:
    cx, cy = cyl.center_xy
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * cx + dy * cy)
    cc = cx * cx + cy * cy - cyl.radius**2
    disc = b * b - 4 * a * cc
    best = np.full(dirs.shape[:-1], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(np.maximum(disc, 0.0))
        for t in ((-b - root) / (2 * a), (-b + root) / (2 * a)):
            z = t * dz
            ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= cyl.z0) & (z <= cyl.z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (cyl.z0, cyl.z1):
            t = zc / dz
            px, py = t * dx - cx, t * dy - cy
            ok = (dz != 0) & (t > 0) & (px * px + py * py <= cyl.radius**2)
            best = np.where(ok & (t < best), t, best)
    return best


def intersect_ground(dirs: np.ndarray, ground_z: float) -> np.ndarray:
    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        t = ground_z / dz
    return np.where((dz < 0) & (t > 0), t, np.inf) if ground_z < 0 else np.full(dz.shape, np.inf)


def intersect_shape(dirs: np.ndarray, shape: Shape) -> np.ndarray:
    return intersect_box(dirs, shape) if isinstance(shape, Box) else intersect_cylinder(dirs, shape)


def cast_rays(dirs: np.ndarray, objects: List[Shape], ground_z: float, max_range: float):
    """Nearest hit distance and label per ray; misses get (inf, -1)."""
    t = intersect_ground(dirs, ground_z)
    label = np.where(np.isfinite(t), BACKGROUND, -1)
    for shape in objects:
        ts = intersect_shape(dirs, shape)
        closer = ts < t
        t = np.where(closer, ts, t)
        label = np.where(closer, shape.label, label)
    miss = ~(t <= max_range)
    return np.where(miss, np.inf, t), np.where(miss, -1, label)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Cast every beam of ``spec.projection``; returns labeled hit points in row-major beam order."""
    objects = sample_objects(spec)
    dirs = spec.projection.beam_directions().reshape(-1, 3)
    t, labels = cast_rays(dirs, objects, spec.ground_z, spec.max_range)
    hit = np.isfinite(t)
    points = dirs[hit] * t[hit, None]
    # crude reflectivity falloff; read but unused by the network
    intensity = np.clip(1.0 / (1.0 + 0.05 * t[hit]), 0.0, 1.0)
    return PointCloud(points, intensity=intensity, labels=labels[hit])
