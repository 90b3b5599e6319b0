"""Box geometry and region feature pooling.

Boxes are ``(x1, y1, x2, y2)`` in continuous image coordinates with an
exclusive far edge, so ``width = x2 - x1``.  Array-valued functions take
``[N, 4]`` float arrays; :class:`Box` is the scalar convenience type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Tensor

# dw/dh larger than this would overflow exp() on garbage predictions
MAX_LOG_RATIO = abs(math.log(16.0 / 1000))


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    label: Optional[int] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a, score=None, label=None) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), score, label)


@dataclass(frozen=True)
class RoI:
    image_index: int
    box: Box
    stage: int = 0


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a list of Boxes or an array-like into a float64 [N, 4] array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def rois_to_array(rois: Sequence[RoI]) -> np.ndarray:
    """List of RoI -> ``[R, 5]`` array of ``(image_index, x1, y1, x2, y2)``."""
    if len(rois) == 0:
        return np.zeros((0, 5))
    return np.array([[r.image_index, r.box.x1, r.box.y1, r.box.x2, r.box.y2] for r in rois], dtype=np.float64)


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]).clip(0) * (b[:, 3] - b[:, 1]).clip(0)


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU matrix ``[N, M]``; zero-area boxes give 0."""
    a, b = as_boxes(a), as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(box_iou(a, b)[0, 0])


def encode_deltas(proposals, targets) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` taking ``proposals`` onto ``targets``."""
    p, t = as_boxes(proposals), as_boxes(targets)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("encode_deltas: proposals need positive width and height")
    pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    tcx, tcy = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return np.stack([(tcx - pcx) / pw, (tcy - pcy) / ph, np.log(tw / pw), np.log(th / ph)], axis=1)


def decode_deltas(proposals, deltas, image_size=None) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; clipped to ``image_size`` (h, w) when given."""
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("decode_deltas: proposals need positive width and height")
    pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    cx = pcx + d[:, 0] * pw
    cy = pcy + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    h = ph * np.exp(np.clip(d[:, 3], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size) -> np.ndarray:
    h, w = _hw(image_size)
    b = as_boxes(boxes).copy()
    b[:, 0::2] = b[:, 0::2].clip(0, w)
    b[:, 1::2] = b[:, 1::2].clip(0, h)
    return b


def _hw(image_size) -> tuple[int, int]:
    if np.isscalar(image_size):
        return int(image_size), int(image_size)
    return int(image_size[0]), int(image_size[1])


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending score order.

    Equal scores are visited in input order, so the lower index survives.
    """
    b = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ious = box_iou(b, b)
    suppressed = np.zeros(len(b), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# RoIAlign
# ---------------------------------------------------------------------------


def _sample_weights(start: np.ndarray, length: np.ndarray, out_size: int, sampling_ratio: int, size: int, dtype) -> np.ndarray:
    """Per-RoI averaged bilinear weights along one axis: ``[R, out_size, size]``.

    ``start``/``length`` are in feature coordinates where pixel ``i`` has its
    centre at ``i + 0.5``.  Sample positions are clamped to the border.
    """
    r = start.shape[0]
    offs = (np.arange(out_size)[:, None] + (np.arange(sampling_ratio)[None, :] + 0.5) / sampling_ratio).reshape(-1)
    pos = start[:, None] + offs[None, :] * (length / out_size)[:, None] - 0.5
    pos = pos.clip(0.0, size - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = pos - i0
    w = np.zeros((r, out_size, size), dtype=dtype)
    rows = np.repeat(np.arange(r), out_size * sampling_ratio)
    bins = np.tile(np.repeat(np.arange(out_size), sampling_ratio), r)
    np.add.at(w, (rows, bins, i0.reshape(-1)), (1.0 - frac).reshape(-1) / sampling_ratio)
    np.add.at(w, (rows, bins, i1.reshape(-1)), frac.reshape(-1) / sampling_ratio)
    return w


def roi_align(features: Tensor, rois, out_size: int, spatial_scale: float, sampling_ratio: int = 2) -> Tensor:
    """Pool ``[R, C, out_size, out_size]`` patches from ``features`` [N, C, H, W].

    ``rois`` is an ``[R, 5]`` array of ``(image_index, x1, y1, x2, y2)`` in image
    coordinates (or a list of :class:`RoI`).  Each output cell averages
    ``sampling_ratio**2`` bilinear samples.  Box coordinates are constants:
    gradients flow to ``features`` only.
    """
    if isinstance(rois, (list, tuple)):
        rois = rois_to_array(rois)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    n, c, h, w = features.shape
    r = rois.shape[0]
    dtype = features.dtype
    if r == 0:
        empty = np.zeros((0, c, out_size, out_size), dtype=dtype)
        return Tensor._make(empty, (features,), lambda g: (np.zeros(features.shape, dtype=g.dtype),))
    bidx = rois[:, 0].astype(np.int64)
    if np.any((bidx < 0) | (bidx >= n)):
        raise ValueError(f"roi_align: image index out of range for batch of {n}")
    x1, y1 = rois[:, 1] * spatial_scale, rois[:, 2] * spatial_scale
    rw = np.maximum((rois[:, 3] - rois[:, 1]) * spatial_scale, 1e-6)
    rh = np.maximum((rois[:, 4] - rois[:, 2]) * spatial_scale, 1e-6)
    wy = _sample_weights(y1, rh, out_size, sampling_ratio, h, dtype)
    wx = _sample_weights(x1, rw, out_size, sampling_ratio, w, dtype)
    feats = features.data[bidx]
    out = wy[:, None] @ feats @ wx[:, None].transpose(0, 1, 3, 2)

    def backward(g):
        per_roi = wy[:, None].transpose(0, 1, 3, 2) @ g @ wx[:, None]
        grad = np.zeros(features.shape, dtype=g.dtype)
        for b in np.unique(bidx):
            grad[b] = per_roi[bidx == b].sum(axis=0)
        return (grad,)

    return Tensor._make(out, (features,), backward)


def map_roi_levels(boxes, image_size, num_levels: int = 4) -> np.ndarray:
    """Pyramid level index (0 = P2) for each box.

    ``floor(2 + log2(sqrt(area) / (image_size / 8)))`` clamped to P2..P5.
    """
    h, w = _hw(image_size)
    scale = np.sqrt(np.maximum(box_area(boxes), 1e-6))
    lvl = np.floor(2 + np.log2(scale / (max(h, w) / 8.0)))
    return (lvl.clip(2, 2 + num_levels - 1) - 2).astype(np.int64)


def pyramid_roi_align(levels: Sequence[Tensor], strides: Sequence[int], rois: np.ndarray, out_size: int, image_size, sampling_ratio: int = 2) -> Tensor:
    """RoIAlign where each RoI reads from the pyramid level matched to its size."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    lvl = map_roi_levels(rois[:, 1:], image_size, len(levels))
    parts, order = [], []
    for i, (feat, stride) in enumerate(zip(levels, strides)):
        idx = np.nonzero(lvl == i)[0]
        if idx.size == 0:
            continue
        parts.append(roi_align(feat, rois[idx], out_size, 1.0 / stride, sampling_ratio))
        order.append(idx)
    if not parts:
        return roi_align(levels[0], rois, out_size, 1.0 / strides[0], sampling_ratio)
    pooled = parts[0] if len(parts) == 1 else ops.concat(parts, axis=0)
    order = np.concatenate(order)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    if np.array_equal(inverse, np.arange(order.size)):
        return pooled
    return ops.index_rows(pooled, inverse)
