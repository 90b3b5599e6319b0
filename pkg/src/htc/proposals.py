"""Proposal generation and per-stage RoI assignment.

There is no learned proposal network: proposals are ground-truth boxes with
Gaussian jitter on centre and log-scale, mixed with uniformly random boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import StageConfig
from .roi import box_iou, clip_boxes, encode_deltas

MIN_BOX_SIDE = 1.0


@dataclass
class AssignedBatch:
    rois: np.ndarray  # [S, 4] sampled boxes, positives first
    labels: np.ndarray  # [S] int, 0 = background
    matched_gt: np.ndarray  # [S] int, -1 for background
    max_iou: np.ndarray  # [S]
    box_targets: np.ndarray  # [P, 4] raw deltas for the positives
    mask_targets: np.ndarray  # [P, M, M] uint8

    @property
    def num_pos(self) -> int:
        return int((self.labels > 0).sum())

    @property
    def pos_rois(self) -> np.ndarray:
        return self.rois[: self.num_pos]


def fix_degenerate(boxes: np.ndarray, image_size) -> np.ndarray:
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    b = clip_boxes(boxes, (h, w))
    for lo, hi, limit in ((0, 2, w), (1, 3, h)):
        short = b[:, hi] - b[:, lo] < MIN_BOX_SIDE
        b[short, hi] = np.minimum(b[short, lo] + MIN_BOX_SIDE, limit)
        b[short, lo] = b[short, hi] - MIN_BOX_SIDE
    return b


def generate_proposals(
    gt_boxes,
    image_size,
    rng_seed,
    n_jitter: int = 8,
    n_random: int = 32,
    center_sigma: float = 0.15,
    scale_sigma: float = 0.2,
) -> np.ndarray:
    """``n_jitter`` perturbed copies of each GT box followed by ``n_random`` uniform boxes."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) == 0:
        raise ValueError("generate_proposals needs at least one ground-truth box")
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    rng = np.random.default_rng(rng_seed)
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    cx, cy = gt[:, 0] + gw / 2, gt[:, 1] + gh / 2
    shape = (len(gt), n_jitter)
    ncx = cx[:, None] + rng.normal(0, 1, shape) * center_sigma * gw[:, None]
    ncy = cy[:, None] + rng.normal(0, 1, shape) * center_sigma * gh[:, None]
    nw = gw[:, None] * np.exp(rng.normal(0, 1, shape) * scale_sigma)
    nh = gh[:, None] * np.exp(rng.normal(0, 1, shape) * scale_sigma)
    jit = np.stack([ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2], axis=-1).reshape(-1, 4)

    side = np.exp(rng.uniform(np.log(8), np.log(max(h, w) / 2), size=(n_random, 2)))
    x1 = rng.uniform(0, 1, n_random) * (w - side[:, 0])
    y1 = rng.uniform(0, 1, n_random) * (h - side[:, 1])
    rnd = np.stack([x1, y1, x1 + side[:, 0], y1 + side[:, 1]], axis=1)
    return fix_degenerate(np.concatenate([jit, rnd]), (h, w))


def dense_proposals(image_size, stride: int = 8, sizes=(16, 32, 48), ratios=(0.5, 1.0, 2.0)) -> np.ndarray:
    """Sliding-window boxes for images without annotations."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    cy, cx = np.meshgrid(np.arange(stride / 2, h, stride), np.arange(stride / 2, w, stride), indexing="ij")
    out = []
    for s in sizes:
        for r in ratios:
            bw, bh = s / np.sqrt(r), s * np.sqrt(r)
            out.append(np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1).reshape(-1, 4))
    return fix_degenerate(np.concatenate(out), (h, w))


def crop_mask_targets(masks: np.ndarray, boxes: np.ndarray, size: int = 28) -> np.ndarray:
    """Nearest-neighbour crop of each mask inside its box, resized to ``size``x``size``.

    Cell ``(i, j)`` reads the pixel containing the cell centre; centres outside the
    image read 0.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    out = np.zeros((n, size, size), dtype=np.uint8)
    if n == 0:
        return out
    h, w = masks.shape[1:]
    t = (np.arange(size) + 0.5) / size
    ys = boxes[:, 1:2] + t[None] * (boxes[:, 3:4] - boxes[:, 1:2])
    xs = boxes[:, 0:1] + t[None] * (boxes[:, 2:3] - boxes[:, 0:1])
    yi, xi = np.floor(ys).astype(np.int64), np.floor(xs).astype(np.int64)
    vy = (yi >= 0) & (yi < h)
    vx = (xi >= 0) & (xi < w)
    yi, xi = yi.clip(0, h - 1), xi.clip(0, w - 1)
    for k in range(n):
        crop = masks[k][yi[k][:, None], xi[k][None, :]]
        out[k] = crop * (vy[k][:, None] & vx[k][None, :])
    return out


def assign(proposals: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Matched GT index per proposal (-1 below threshold) and its max IoU.

    Ties between GTs go to the lowest GT index.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.full(len(proposals), -1, dtype=np.int64), np.zeros(len(proposals))
    ious = box_iou(proposals, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(proposals)), best]
    matched = np.where(best_iou >= iou_threshold, best, -1)
    return matched.astype(np.int64), best_iou


def assign_and_sample(
    proposals,
    gt_boxes,
    gt_labels,
    gt_masks,
    cfg: StageConfig,
    rng_seed,
    mask_size: int = 28,
) -> AssignedBatch:
    if not 0.0 < cfg.iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {cfg.iou_threshold}")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    matched, best_iou = assign(proposals, gt_boxes, cfg.iou_threshold)

    rng = np.random.default_rng(rng_seed)
    pos = np.nonzero(matched >= 0)[0]
    neg = np.nonzero(matched < 0)[0]
    n_pos = min(len(pos), int(cfg.samples_per_image * cfg.positive_fraction))
    n_neg = min(len(neg), cfg.samples_per_image - n_pos)
    if n_pos < len(pos):
        pos = np.sort(rng.choice(pos, n_pos, replace=False))
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    keep = np.concatenate([pos, neg]).astype(np.int64)

    rois = proposals[keep]
    m = matched[keep]
    labels = np.where(m >= 0, gt_labels[np.maximum(m, 0)] if len(gt_labels) else 0, 0).astype(np.int64)
    pos_gt = m[: len(pos)]
    box_targets = encode_deltas(rois[: len(pos)], gt_boxes[pos_gt]) if len(pos) else np.zeros((0, 4))
    if len(pos):
        mask_targets = crop_mask_targets(gt_masks[pos_gt], rois[: len(pos)], mask_size)
    else:
        mask_targets = np.zeros((0, mask_size, mask_size), dtype=np.uint8)
    return AssignedBatch(rois, labels, m, best_iou[keep], box_targets, mask_targets)
