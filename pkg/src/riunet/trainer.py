"""Training loop, evaluation and inference benchmarking."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .dataset import DatasetManifest, batch_iterator, make_batch
from .loss import masked_weighted_cross_entropy
from .metrics import SegMetrics
from .model import UNetModel, load_weights, save_weights
from .optim import adam_step
from .projection import backproject_labels, project

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    epochs: int = 10
    bn_momentum: float = 0.99
    seed: int = 0
    checkpoint_interval: int = 1
    deterministic: bool = False
    recalibrate_bn: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.checkpoint_interval < 1:
            raise ValueError("learning_rate and batch_size must be positive, epochs non-negative, checkpoint_interval >= 1")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    batch_losses: List[float] = field(default_factory=list)
    val_metrics: List[SegMetrics] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    steps: int = 0
    start_epoch: int = 0


def _logit_summary(logits: np.ndarray) -> str:
    finite = np.isfinite(logits)
    vals = logits[finite]
    rng = f"min {vals.min():.4g} max {vals.max():.4g} mean {vals.mean():.4g}" if vals.size else "no finite entries"
    return f"{int((~finite).sum())} non-finite of {logits.size} logits; {rng}"


def train(
    model: UNetModel,
    manifest: DatasetManifest,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    resume=None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainReport:
    """Adam on the masked weighted cross-entropy, for ``cfg.epochs`` epochs.

    Checkpoints (``ckpt_epochNNNN.riuw`` every ``checkpoint_interval`` epochs
    and ``final.riuw``) go to ``out_dir`` when given. ``resume`` points at a
    checkpoint from an earlier run with the same config; training continues
    from the epoch after the one it recorded.
    """
    if cfg.deterministic:
        T.set_deterministic(True)
    if not manifest.split_ids("train"):
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    emit = log or (lambda line: logger.info(line))

    start_epoch, step = 0, 0
    if resume is not None:
        _, state = load_weights(resume, model)
        start_epoch, step = state.get("epoch", 0), state.get("step", 0)
    model.set_bn_momentum(cfg.bn_momentum)
    params = model.parameters()
    report = TrainReport(start_epoch=start_epoch)
    has_val = bool(manifest.split_ids("val"))

    def checkpoint(name, epoch):
        if out is None:
            return
        path = out / name
        save_weights(model, path, optimizer=True, train_state={"epoch": epoch, "step": step, "seed": cfg.seed})
        report.checkpoints.append(path)

    if start_epoch == 0:
        checkpoint("ckpt_epoch0000.riuw", 0)
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        losses = []
        for batch in batch_iterator(manifest, "train", cfg.batch_size, cfg.seed, epoch):
            logits = model.forward(batch.inputs.astype(model.dtype))
            loss = masked_weighted_cross_entropy(logits, batch.labels, batch.mask, batch.weights).value
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch + 1} step {step} on batch {batch.ids}: "
                    + _logit_summary(logits.data)
                )
            T.backward(loss, params)
            adam_step(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            step += 1
            losses.append(value)
            report.batch_losses.append(value)
            emit(f"epoch={epoch + 1} step={step} loss={value:.6f} elapsed={time.perf_counter() - t0:.2f}")
        mean_loss = float(np.mean(losses))
        report.epoch_losses.append(mean_loss)
        line = f"epoch={epoch + 1} train_loss={mean_loss:.6f}"
        if has_val:
            val = evaluate(model, manifest, "val")
            report.val_metrics.append(val)
            line += f" val_mean_iou={val.mean_iou_foreground:.4f} val_accuracy={val.pixel_accuracy:.4f}"
        emit(line)
        if (epoch + 1) % cfg.checkpoint_interval == 0:
            checkpoint(f"ckpt_epoch{epoch + 1:04d}.riuw", epoch + 1)
    report.steps = step
    if cfg.epochs > start_epoch:
        if cfg.recalibrate_bn:
            recalibrate_batchnorm(model, manifest, "train", cfg.batch_size)
        checkpoint("final.riuw", cfg.epochs)
    return report


def recalibrate_batchnorm(model: UNetModel, manifest: DatasetManifest, split: str = "train", batch_size: int = 8) -> None:
    """Replace running statistics by their average over one pass of ``split``.

    A 0.99-momentum moving average needs several hundred steps to forget its
    initial value and lags behind weights that are still moving; short runs
    therefore evaluate noticeably worse than they train. Batch ``t`` enters
    with momentum ``(t - 1) / t``, giving the plain mean of per-batch
    statistics. Weights are untouched.
    """
    norms = model.norms()
    saved = [bn.momentum for bn in norms]
    model.train()
    try:
        with T.no_grad():
            for t, batch in enumerate(batch_iterator(manifest, split, batch_size, 0, 0, shuffle=False), start=1):
                for bn in norms:
                    bn.momentum = (t - 1) / t
                model.forward(batch.inputs.astype(model.dtype))
    finally:
        for bn, m in zip(norms, saved):
            bn.momentum = m


@dataclass
class EvalResult:
    pixel: SegMetrics
    points: Optional[SegMetrics] = None


def _evaluate_ids(model: UNetModel, manifest: DatasetManifest, ids, batch_size: int, points: bool) -> EvalResult:
    k = manifest.num_classes
    pix = SegMetrics(k)
    pts = SegMetrics(k) if points else None
    for start in range(0, len(ids), batch_size):
        batch = make_batch(manifest, ids[start : start + batch_size])
        with T.no_grad():
            pred = model.forward(batch.inputs.astype(model.dtype)).data.argmax(axis=1)
        pix.update(pred, batch.labels, batch.mask)
        if points:
            for i, sid in enumerate(batch.ids):
                cloud = manifest.load_cloud(sid)
                if cloud is None or cloud.labels is None:
                    continue
                image = project(cloud, manifest.projection)
                point_pred = backproject_labels(image, cloud, pred[i])
                inside = image.index_map[:, 0] >= 0
                pts.update(point_pred[inside], cloud.labels[inside])
    return EvalResult(pix, pts)


def evaluate(
    model: UNetModel,
    manifest: DatasetManifest,
    split: str = "val",
    batch_size: int = 8,
    points: bool = False,
    workers: int = 1,
):
    """Eval-mode confusion over valid pixels of ``split``.

    With ``points`` the prediction is also back-projected onto the stored
    clouds and scored per in-view point; an :class:`EvalResult` is returned
    instead of bare pixel metrics. ``workers > 1`` shards the ids and merges
    the shard confusions.
    """
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    model.eval()
    if workers <= 1:
        result = _evaluate_ids(model, manifest, ids, batch_size, points)
    else:
        shards = [ids[i::workers] for i in range(workers)]
        for sid in ids:
            manifest.load_sample(sid)  # warm the cache before threads share it
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: _evaluate_ids(model, manifest, s, batch_size, points), [s for s in shards if s]))
        result = parts[0]
        for part in parts[1:]:
            result = EvalResult(
                result.pixel.merge(part.pixel),
                result.points.merge(part.points) if points else None,
            )
    return result if points else result.pixel


def evaluate_labels(manifest: DatasetManifest, split: str, predictions: Callable[[str], np.ndarray]) -> SegMetrics:
    """Score externally supplied label grids (one per sample id)."""
    metrics = SegMetrics(manifest.num_classes)
    for sid in manifest.split_ids(split):
        s = manifest.load_sample(sid)
        metrics.update(predictions(sid), s.labels, s.mask)
    return metrics


@dataclass
class BenchReport:
    frames: int
    elapsed: float
    fps: float

    def __str__(self):
        return f"frames={self.frames} elapsed={self.elapsed:.4f}s fps={self.fps:.3f}"


def benchmark_inference(model: UNetModel, n_frames: int, seed: int = 0) -> BenchReport:
    """Time eval-mode single-frame forward passes on random input."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal((1, cfg.in_channels, cfg.input_height, cfg.input_width)).astype(model.dtype)
    model.eval()
    t0 = time.perf_counter()
    with T.no_grad():
        for _ in range(n_frames):
            model.forward(frame)
    elapsed = time.perf_counter() - t0
    return BenchReport(n_frames, elapsed, n_frames / elapsed if n_frames and elapsed > 0 else 0.0)
