"""Dataset directories: projected samples, a text manifest and batching.

Layout of a built dataset::

    <root>/manifest.txt
    <root>/samples/<id>.rimg      raw depth/elevation, mask, labels, weights
    <root>/clouds/<id>.bin        source cloud (+ <id>.label) for point-level eval
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import formats
from .formats import FormatError, Sample
from .loss import boundary_weight_map, class_balance_weights
from .projection import ChannelStats, PointCloud, ProjectionConfig, channel_stats, normalize_channels, project
from .scene import CLASS_NAMES, SceneSpec, generate_scene

MANIFEST_HEADER = "# riunet dataset manifest"
MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    root: Path
    ids: List[str]
    splits: Dict[str, str]
    stats: ChannelStats
    class_names: Tuple[str, ...] = CLASS_NAMES
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    class_weights: Tuple[float, ...] = ()
    w0: float = 10.0
    sigma: float = 5.0
    seed: int = 0
    clouds: Dict[str, str] = field(default_factory=dict)
    _cache: Dict[str, Sample] = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_ids(self, split: str) -> List[str]:
        return [i for i in self.ids if self.splits[i] == split]

    def sample_path(self, sample_id: str) -> Path:
        return self.root / "samples" / f"{sample_id}.rimg"

    def cloud_path(self, sample_id: str) -> Optional[Path]:
        rel = self.clouds.get(sample_id)
        return self.root / rel if rel else None

    def load_sample(self, sample_id: str) -> Sample:
        if sample_id not in self._cache:
            s = formats.read_range_image(self.sample_path(sample_id))
            s.id = sample_id
            self._cache[sample_id] = s
        return self._cache[sample_id]

    def load_cloud(self, sample_id: str) -> Optional[PointCloud]:
        path = self.cloud_path(sample_id)
        return formats.read_labeled_cloud(path) if path else None

    # serialization -------------------------------------------------------
    def to_text(self) -> str:
        cfg = self.projection
        lines = [
            f"{MANIFEST_HEADER} v{MANIFEST_VERSION}",
            f"version = {MANIFEST_VERSION}",
            f"seed = {self.seed}",
            f"classes = {','.join(self.class_names)}",
            f"projection.width = {cfg.width}",
            f"projection.height = {cfg.height}",
            f"projection.theta_min = {cfg.theta_min!r}",
            f"projection.theta_max = {cfg.theta_max!r}",
            f"projection.phi_min = {cfg.phi_min!r}",
            f"projection.phi_max = {cfg.phi_max!r}",
            f"stats.mean = {' '.join(repr(float(v)) for v in self.stats.mean)}",
            f"stats.std = {' '.join(repr(float(v)) for v in self.stats.std)}",
            f"class_weights = {' '.join(repr(float(v)) for v in self.class_weights)}",
            f"weight_map.w0 = {self.w0!r}",
            f"weight_map.sigma = {self.sigma!r}",
        ]
        for sid in self.ids:
            cloud = self.clouds.get(sid, "-")
            lines.append(f"sample = {sid} {self.splits[sid]} {cloud}")
        return "\n".join(lines) + "\n"

    def save(self) -> Path:
        path = self.root / "manifest.txt"
        formats.atomic_write(path, self.to_text().encode("utf-8"))
        return path


def parse_manifest(text: str, root) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise FormatError("not a dataset manifest: missing header")
    values: Dict[str, str] = {}
    ids, splits, clouds = [], {}, {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"manifest line {n}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key == "sample":
            parts = value.split()
            if len(parts) != 3 or parts[1] not in ("train", "val"):
                raise FormatError(f"manifest line {n}: malformed sample entry {value!r}")
            sid, split, cloud = parts
            if sid in splits:
                raise FormatError(f"manifest line {n}: duplicate sample id {sid!r}")
            ids.append(sid)
            splits[sid] = split
            if cloud != "-":
                clouds[sid] = cloud
        else:
            values[key] = value
    try:
        if int(values["version"]) != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {values['version']}")
        cfg = ProjectionConfig(
            width=int(values["projection.width"]),
            height=int(values["projection.height"]),
            theta_min=float(values["projection.theta_min"]),
            theta_max=float(values["projection.theta_max"]),
            phi_min=float(values["projection.phi_min"]),
            phi_max=float(values["projection.phi_max"]),
        )
        floats = lambda key: tuple(float(v) for v in values[key].split())
        return DatasetManifest(
            root=Path(root),
            ids=ids,
            splits=splits,
            stats=ChannelStats(floats("stats.mean"), floats("stats.std")),
            class_names=tuple(values["classes"].split(",")),
            projection=cfg,
            class_weights=floats("class_weights"),
            w0=float(values["weight_map.w0"]),
            sigma=float(values["weight_map.sigma"]),
            seed=int(values["seed"]),
            clouds=clouds,
        )
    except KeyError as exc:
        raise FormatError(f"manifest lacks required key {exc.args[0]!r}") from None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def _round_to_file_precision(cloud: PointCloud) -> PointCloud:
    # project exactly what a reader of the stored .bin file would see
    pts = cloud.points.astype(np.float32).astype(np.float64)
    inten = None if cloud.intensity is None else cloud.intensity.astype(np.float32).astype(np.float64)
    return PointCloud(pts, inten, cloud.labels)


def build_dataset(
    sources: Iterable[Tuple[str, Union[PointCloud, SceneSpec, str, Path]]],
    out_dir,
    cfg: ProjectionConfig = ProjectionConfig(),
    seed: int = 0,
    n_val: int = 0,
    w0: float = 10.0,
    sigma: float = 5.0,
    class_balance: bool = True,
    class_names: Sequence[str] = CLASS_NAMES,
) -> DatasetManifest:
    """Project every source, split, compute statistics and weights, write files.

    ``sources`` yields ``(id, source)`` where a source is a labeled
    :class:`PointCloud`, a :class:`SceneSpec` or a ``.bin`` path (labels read
    from the sibling ``.label`` file). The validation split holds ``n_val``
    ids chosen by ``seed``. Rebuilding with the same inputs reproduces every
    file byte for byte.
    """
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "clouds").mkdir(parents=True, exist_ok=True)

    ids: List[str] = []
    images = {}
    for sid, src in sources:
        if sid in images:
            raise ValueError(f"duplicate sample id {sid!r}")
        if isinstance(src, SceneSpec):
            cloud = generate_scene(replace(src, projection=cfg))
        elif isinstance(src, PointCloud):
            cloud = src
        else:
            cloud = formats.read_labeled_cloud(src)
        if cloud.labels is None:
            raise ValueError(f"sample {sid!r} has no per-point labels")
        cloud = _round_to_file_precision(cloud)
        formats.write_point_cloud(cloud, out / "clouds" / f"{sid}.bin")
        formats.write_labels(cloud.labels, out / "clouds" / f"{sid}.label")
        images[sid] = project(cloud, cfg)
        ids.append(sid)
    if not ids:
        raise ValueError("no samples to build a dataset from")
    if not 0 <= n_val < len(ids):
        raise ValueError(f"validation size {n_val} must leave at least one training sample out of {len(ids)}")

    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    splits = {sid: ("val" if sid in val else "train") for sid in ids}
    train_ids = [sid for sid in ids if splits[sid] == "train"]

    stats = channel_stats([images[s].channels() for s in train_ids], [images[s].mask for s in train_ids])
    k = len(class_names)
    counts = np.zeros(k, dtype=np.int64)
    for sid in train_ids:
        img = images[sid]
        counts += np.bincount(img.labels[img.mask > 0].astype(np.int64), minlength=k)[:k]
    wc = class_balance_weights(counts) if class_balance else np.ones(k)

    for sid in ids:
        img = images[sid]
        weights = boundary_weight_map(img.labels, img.mask, w0, sigma, wc)
        formats.write_range_image(Sample.from_range_image(sid, img, weights), out / "samples" / f"{sid}.rimg")

    manifest = DatasetManifest(
        root=out,
        ids=ids,
        splits=splits,
        stats=stats,
        class_names=tuple(class_names),
        projection=cfg,
        class_weights=tuple(float(v) for v in wc),
        w0=w0,
        sigma=sigma,
        seed=seed,
        clouds={sid: f"clouds/{sid}.bin" for sid in ids},
    )
    manifest.save()
    return manifest


def synthetic_sources(count: int, seed: int, base: SceneSpec = SceneSpec()):
    """``(id, SceneSpec)`` pairs with per-scene seeds derived from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [(f"scene_{i:04d}", replace(base, seed=int(s))) for i, s in enumerate(seeds)]


@dataclass
class Batch:
    ids: List[str]
    inputs: np.ndarray  # N x C x H x W, normalized
    labels: np.ndarray  # N x H x W
    mask: np.ndarray
    weights: np.ndarray


def epoch_order(ids: Sequence[str], seed: int, epoch: int) -> List[str]:
    perm = np.random.default_rng([seed, epoch]).permutation(len(ids))
    return [ids[i] for i in perm]


def make_batch(manifest: DatasetManifest, ids: Sequence[str]) -> Batch:
    samples = [manifest.load_sample(i) for i in ids]
    inputs = np.stack([normalize_channels(s.channels, manifest.stats, s.mask) for s in samples])
    labels = np.stack([s.labels if s.labels is not None else np.zeros(s.shape, np.uint8) for s in samples]).astype(np.int64)
    mask = np.stack([s.mask for s in samples])
    weights = np.stack([s.weights if s.weights is not None else s.mask.astype(np.float32) for s in samples])
    return Batch(list(ids), inputs, labels, mask, weights)


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> Iterator[Batch]:
    """Batches of one epoch; the order depends only on (seed, epoch).

    The final partial batch is kept.
    """
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = epoch_order(ids, seed, epoch) if shuffle else list(ids)
    for start in range(0, len(order), batch_size):
        yield make_batch(manifest, order[start : start + batch_size])
