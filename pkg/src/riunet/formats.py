"""Binary point-cloud, label and range-image files.

All multi-byte values are little-endian.

* point cloud (``.bin``): consecutive float32 records ``x, y, z, intensity``
* labels (``.label``): one uint32 class id per point
* range image (``.rimg``): ``RIMG`` magic, then uint32 version, H, W, C, then
  C float32 planes, a uint8 mask plane, a uint32 presence bitfield
  (bit 0 labels, bit 1 weights), an optional uint8 label plane and an
  optional float32 weight plane
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .projection import PointCloud, RangeImage

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
HAS_LABELS = 1
HAS_WEIGHTS = 2
RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])


class FormatError(ValueError):
    """Malformed or invariant-violating file content."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def read_point_cloud(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if len(blob) % RECORD.itemsize:
        raise FormatError(
            f"{path}: size {len(blob)} is not a multiple of {RECORD.itemsize}-byte records "
            f"({len(blob) % RECORD.itemsize} trailing bytes at offset {len(blob) - len(blob) % RECORD.itemsize})"
        )
    rec = np.frombuffer(blob, dtype=RECORD)
    arr = rec.view("<f4").reshape(-1, 4)
    bad = ~np.isfinite(arr)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FormatError(f"{path}: non-finite value at byte offset {int(i) * 16 + int(j) * 4}")
    return PointCloud(arr[:, :3].astype(np.float64), intensity=arr[:, 3].astype(np.float64))


def encode_point_cloud(cloud: PointCloud) -> bytes:
    n = len(cloud)
    arr = np.zeros((n, 4), dtype="<f4")
    arr[:, :3] = cloud.points
    if cloud.intensity is not None:
        arr[:, 3] = cloud.intensity
    return arr.tobytes()


def write_point_cloud(cloud: PointCloud, path) -> None:
    atomic_write(path, encode_point_cloud(cloud))


def read_labels(path, count: Optional[int] = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) % 4:
        raise FormatError(f"{path}: size {len(blob)} is not a multiple of 4")
    labels = np.frombuffer(blob, dtype="<u4").astype(np.int64)
    if count is not None and len(labels) != count:
        raise FormatError(f"{path}: {len(labels)} labels for {count} points")
    return labels


def write_labels(labels, path) -> None:
    atomic_write(path, np.asarray(labels).astype("<u4").tobytes())


def read_labeled_cloud(path, label_path=None) -> PointCloud:
    cloud = read_point_cloud(path)
    label_path = Path(label_path) if label_path else Path(path).with_suffix(".label")
    if label_path.exists():
        cloud.labels = read_labels(label_path, len(cloud))
    return cloud


@dataclass
class Sample:
    """One stored range image: raw channels, mask, labels and loss weights."""

    id: str
    channels: np.ndarray
    mask: np.ndarray
    labels: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def from_range_image(cls, sample_id: str, image: RangeImage, weights=None) -> "Sample":
        return cls(sample_id, image.channels(), image.mask.astype(np.uint8), image.labels, weights)

    def equals(self, other: "Sample") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return all(same(getattr(self, f), getattr(other, f)) for f in ("channels", "mask", "labels", "weights"))


def validate_sample(sample: Sample) -> None:
    c, h, w = sample.channels.shape
    if sample.mask.shape != (h, w):
        raise FormatError(f"mask shape {sample.mask.shape} does not match channels {h}x{w}")
    if not np.isin(sample.mask, (0, 1)).all():
        raise FormatError("mask holds values other than 0 and 1")
    empty = sample.mask == 0
    if np.any(sample.channels[:, empty] != 0):
        r, cidx = np.argwhere(empty & np.any(sample.channels != 0, axis=0))[0]
        raise FormatError(f"pixel ({r}, {cidx}) has mask 0 but non-zero channel data")
    depth = sample.channels[0][~empty]
    if not np.all(np.isfinite(depth) & (depth > 0)):
        raise FormatError("valid pixels must have a finite, positive depth")
    if not np.all(np.isfinite(sample.channels)):
        raise FormatError("channel data holds non-finite values")
    if sample.labels is not None:
        if sample.labels.shape != (h, w):
            raise FormatError(f"label plane shape {sample.labels.shape} does not match {h}x{w}")
        if np.any(sample.labels[empty] != 0):
            raise FormatError("pixels with mask 0 must carry the background label")
    if sample.weights is not None:
        if sample.weights.shape != (h, w):
            raise FormatError(f"weight plane shape {sample.weights.shape} does not match {h}x{w}")
        if not np.all(np.isfinite(sample.weights) & (sample.weights >= 0)):
            raise FormatError("weights must be finite and non-negative")


def encode_range_image(sample: Sample) -> bytes:
    validate_sample(sample)
    c, h, w = sample.channels.shape
    flags = (HAS_LABELS if sample.labels is not None else 0) | (HAS_WEIGHTS if sample.weights is not None else 0)
    parts = [
        RIMG_MAGIC,
        struct.pack("<4I", RIMG_VERSION, h, w, c),
        np.ascontiguousarray(sample.channels, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes(),
        struct.pack("<I", flags),
    ]
    if sample.labels is not None:
        if sample.labels.max(initial=0) > 255 or sample.labels.min(initial=0) < 0:
            raise FormatError("labels must fit in one byte")
        parts.append(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())
    if sample.weights is not None:
        parts.append(np.ascontiguousarray(sample.weights, dtype="<f4").tobytes())
    return b"".join(parts)


def write_range_image(sample: Sample, path) -> None:
    atomic_write(path, encode_range_image(sample))


def decode_range_image(blob: bytes, sample_id: str = "") -> Sample:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"range image truncated at byte {pos} (need {n} more, have {len(blob) - pos})")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != RIMG_MAGIC:
        raise FormatError("not a range image: bad magic")
    version, h, w, c = struct.unpack("<4I", take(16))
    if version != RIMG_VERSION:
        raise FormatError(f"unsupported range image version {version}")
    channels = np.frombuffer(take(4 * c * h * w), dtype="<f4").reshape(c, h, w).astype(np.float32)
    mask = np.frombuffer(take(h * w), dtype=np.uint8).reshape(h, w).copy()
    (flags,) = struct.unpack("<I", take(4))
    if flags & ~(HAS_LABELS | HAS_WEIGHTS):
        raise FormatError(f"unknown presence flags {flags:#x}")
    labels = weights = None
    if flags & HAS_LABELS:
        labels = np.frombuffer(take(h * w), dtype=np.uint8).reshape(h, w).copy()
    if flags & HAS_WEIGHTS:
        weights = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after the last plane")
    sample = Sample(sample_id, channels, mask, labels, weights)
    validate_sample(sample)
    return sample


def read_range_image(path) -> Sample:
    path = Path(path)
    return decode_range_image(path.read_bytes(), path.stem)


def write_ppm(rgb: np.ndarray, path) -> None:
    """Binary ``P6`` portable pixmap from an (H, W, 3) uint8 array."""
    h, w, _ = rgb.shape
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = blob[len(blob) - 3 * w * h :]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
