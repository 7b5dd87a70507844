"""Spherical projection of LiDAR point clouds onto a two-channel range image.

Columns bin the azimuth, rows bin the elevation angle (row 0 is the highest
elevation). Each pixel keeps the nearest point that falls into it; the image
stores that point's range and its height coordinate ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

BACKGROUND = 0
NO_DATA = 0.0


@dataclass
class PointCloud:
    """Ordered points in the sensor frame, with optional parallel arrays."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            bad = int(np.argwhere(~np.isfinite(self.points))[0, 0])
            raise ValueError(f"point {bad} has a non-finite coordinate")
        n = len(self.points)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != n:
                raise ValueError(f"intensity has {len(self.intensity)} entries for {n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError(f"labels has {len(self.labels)} entries for {n} points")

    def __len__(self) -> int:
        return len(self.points)


class SphericalCoords(NamedTuple):
    theta: float
    phi: float
    d: float


def cartesian_to_spherical(p: Sequence[float]) -> SphericalCoords:
    x, y, z = (float(v) for v in p)
    d = math.sqrt(x * x + y * y + z * z)
    if d == 0.0:
        raise ValueError("cannot take the angles of a zero-length point")
    return SphericalCoords(math.atan2(y, x), math.asin(max(-1.0, min(1.0, z / d))), d)


def spherical_arrays(points: np.ndarray):
    """Vectorised (theta, phi, d); zero-length points get NaN angles."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.sqrt((points * points).sum(axis=1))
    theta = np.arctan2(points[:, 1], points[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.clip(points[:, 2] / d, -1.0, 1.0))
    phi[d == 0] = np.nan
    theta[d == 0] = np.nan
    return theta, phi, d


@dataclass(frozen=True)
class ProjectionConfig:
    width: int = 512
    height: int = 64
    theta_min: float = math.radians(-45.0)
    theta_max: float = math.radians(45.0)
    phi_min: float = math.radians(-24.9)
    phi_max: float = math.radians(2.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image extents must be positive, got {self.width}x{self.height}")
        if not self.theta_max > self.theta_min:
            raise ValueError("theta_max must exceed theta_min")
        if not self.phi_max > self.phi_min:
            raise ValueError("phi_max must exceed phi_min")

    @property
    def delta_theta(self) -> float:
        return (self.theta_max - self.theta_min) / self.width

    @property
    def delta_phi(self) -> float:
        return (self.phi_max - self.phi_min) / self.height

    def pixel_of(self, theta, phi):
        """Floor-binned (row, col); values may fall outside the image."""
        col = np.floor((np.asarray(theta) - self.theta_min) / self.delta_theta)
        row = np.floor((self.phi_max - np.asarray(phi)) / self.delta_phi)
        return row, col

    def beam_directions(self) -> np.ndarray:
        """Unit vectors through every pixel centre, shape (height, width, 3)."""
        theta = self.theta_min + (np.arange(self.width) + 0.5) * self.delta_theta
        phi = self.phi_max - (np.arange(self.height) + 0.5) * self.delta_phi
        th, ph = np.meshgrid(theta, phi)
        return np.stack([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)], axis=-1)


@dataclass
class RangeImage:
    """Depth and elevation grids with a validity mask.

    ``index_map`` holds one (row, col) per input point, ``(-1, -1)`` for points
    that fell outside the field of view.
    """

    depth: np.ndarray
    elevation: np.ndarray
    mask: np.ndarray
    labels: Optional[np.ndarray] = None
    index_map: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.mask.shape

    def channels(self) -> np.ndarray:
        return np.stack([self.depth, self.elevation]).astype(np.float32)


def project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    h, w = cfg.height, cfg.width
    depth = np.full((h, w), NO_DATA, dtype=np.float32)
    elevation = np.full((h, w), NO_DATA, dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8) if cloud.labels is not None else None
    index_map = np.full((len(cloud), 2), -1, dtype=np.int64)
    if len(cloud) == 0:
        return RangeImage(depth, elevation, mask, labels, index_map)

    theta, phi, d = spherical_arrays(cloud.points)
    with np.errstate(invalid="ignore"):
        row, col = cfg.pixel_of(theta, phi)
        inside = (d > 0) & (row >= 0) & (row < h) & (col >= 0) & (col < w)
    idx = np.flatnonzero(inside)
    r = row[idx].astype(np.int64)
    c = col[idx].astype(np.int64)
    index_map[idx, 0] = r
    index_map[idx, 1] = c

    # nearest point wins; equal ranges resolve to the lower point index
    flat = r * w + c
    order = np.lexsort((idx, d[idx], flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    winners = idx[order[first]]
    wr, wc = r[order[first]], c[order[first]]
    depth[wr, wc] = d[winners]
    elevation[wr, wc] = cloud.points[winners, 2]
    mask[wr, wc] = 1
    if labels is not None:
        labels[wr, wc] = cloud.labels[winners]
    return RangeImage(depth, elevation, mask, labels, index_map)


def backproject_labels(image: RangeImage, cloud: PointCloud, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Give each point the label of the pixel it was binned into.

    ``labels`` overrides ``image.labels`` (e.g. a network prediction). Points
    outside the field of view get the background class.
    """
    grid = image.labels if labels is None else np.asarray(labels)
    if grid is None:
        raise ValueError("no label grid to back-project")
    if image.index_map is None:
        raise ValueError("range image carries no point index map")
    if len(image.index_map) != len(cloud):
        raise ValueError(f"index map covers {len(image.index_map)} points but the cloud has {len(cloud)}")
    out = np.full(len(cloud), BACKGROUND, dtype=np.int64)
    mapped = image.index_map[:, 0] >= 0
    out[mapped] = grid[image.index_map[mapped, 0], image.index_map[mapped, 1]]
    return out


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple = (0.0, 0.0)
    std: tuple = (1.0, 1.0)


def channel_stats(channels: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> ChannelStats:
    """Per-channel mean / population std over valid pixels of several images."""
    sums = None
    count = 0
    for ch, m in zip(channels, masks):
        vals = np.asarray(ch, dtype=np.float64)[:, np.asarray(m) > 0]
        s = np.stack([vals.sum(axis=1), (vals * vals).sum(axis=1)])
        sums = s if sums is None else sums + s
        count += vals.shape[1]
    if not count:
        raise ValueError("no valid pixels to compute channel statistics from")
    mean = sums[0] / count
    var = np.maximum(sums[1] / count - mean * mean, 0.0)
    return ChannelStats(tuple(float(v) for v in mean), tuple(float(v) for v in np.sqrt(var)))


def normalize_channels(image, stats: ChannelStats, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Standardise valid pixels per channel; invalid pixels become exactly 0.

    ``image`` is a :class:`RangeImage` or a (C, H, W) array accompanied by
    ``mask``.
    """
    if isinstance(image, RangeImage):
        channels, mask = image.channels(), image.mask
    else:
        channels = np.asarray(image)
        if mask is None:
            raise ValueError("a validity mask is required for a raw channel array")
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"channel std must be positive, got {stats.std}")
    out = (channels - mean[:, None, None]) / std[:, None, None]
    out[:, np.asarray(mask) == 0] = 0.0
    return out.astype(np.float32)
