"""Masked, boundary-weighted cross-entropy and its weight maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor


def softmax_probs(logits: Tensor) -> Tensor:
    """Per-pixel class distribution over the channel axis of NCHW logits."""
    return T.softmax(logits, axis=1)


def class_balance_weights(class_counts: Sequence[float], clamp=(0.1, 10.0)) -> np.ndarray:
    """Inverse-frequency class weights with frequency-weighted mean 1.

    Balanced counts give all-ones. Classes that never occur get the upper
    clamp value.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return np.ones_like(counts)
    freq = counts / total
    with np.errstate(divide="ignore"):
        raw = np.where(freq > 0, 1.0 / (len(counts) * freq), np.inf)
    w = np.clip(raw, *clamp)
    return w / float((freq * w).sum())


def nearest_region_distances(labels: np.ndarray, mask: np.ndarray):
    """Distances (pixels) to the nearest and second-nearest label regions.

    For each pixel, the Euclidean distance to the closest valid pixel of every
    label present is computed; ``d1`` and ``d2`` are the two smallest. With
    fewer than two labels present ``d2`` is infinite.
    """
    labels = np.asarray(labels)
    valid = np.asarray(mask) > 0
    present = np.unique(labels[valid])
    shape = labels.shape
    if len(present) == 0:
        inf = np.full(shape, np.inf)
        return inf, inf.copy()
    dists = np.empty((len(present),) + shape)
    for i, c in enumerate(present):
        region = valid & (labels == c)
        dists[i] = ndimage.distance_transform_edt(~region)
    if len(present) == 1:
        return dists[0], np.full(shape, np.inf)
    dists.sort(axis=0)
    return dists[0], dists[1]


def boundary_weight_map(
    labels: np.ndarray,
    mask: np.ndarray,
    w0: float = 10.0,
    sigma: float = 5.0,
    class_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """w = w_c(label) + w0 * exp(-(d1 + d2)^2 / (2 sigma^2)); 0 on invalid pixels."""
    labels = np.asarray(labels)
    valid = np.asarray(mask) > 0
    if class_weights is None:
        wc = np.ones(labels.shape)
    else:
        wc = np.asarray(class_weights, dtype=np.float64)[labels]
    d1, d2 = nearest_region_distances(labels, valid)
    with np.errstate(over="ignore", invalid="ignore"):
        border = np.where(np.isfinite(d2), w0 * np.exp(-((d1 + d2) ** 2) / (2.0 * sigma**2)), 0.0)
    return np.where(valid, wc + border, 0.0).astype(np.float32)


@dataclass
class LossValue:
    value: Tensor
    valid_pixel_count: int

    def item(self) -> float:
        return self.value.item()


def masked_weighted_cross_entropy(logits: Tensor, labels, mask, weights=None) -> LossValue:
    """-(1 / sum w) * sum over valid pixels of w(x) log p_label(x).

    ``labels``, ``mask`` and ``weights`` are (N, H, W) arrays; ``weights``
    defaults to 1 on every pixel. Pixels with mask 0 contribute exactly zero
    to the value and to the gradient.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels).reshape(n, h, w)
    valid = np.asarray(mask).reshape(n, h, w) > 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("loss needs at least one valid pixel")
    if weights is None:
        weights = np.ones((n, h, w))
    pix_w = np.where(valid, np.asarray(weights, dtype=np.float64).reshape(n, h, w), 0.0)
    total = pix_w.sum()
    if not total > 0:
        raise ValueError("valid pixels carry zero total weight")
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k, h, w), dtype=logits.dtype)
    safe = np.where(valid, labels, 0)
    np.put_along_axis(onehot, safe[:, None].astype(np.int64), 1.0, axis=1)
    coeff = onehot * (pix_w / total).astype(logits.dtype)[:, None]
    logp = T.log_softmax(logits, axis=1)
    value = T.neg(T.tensor_sum(T.mul(logp, coeff)))
    return LossValue(value, count)
