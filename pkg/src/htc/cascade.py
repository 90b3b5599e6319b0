"""Cascaded box and mask heads and the pipeline variants built from them.

Flags on :class:`~htc.config.PipelineConfig` select the data flow:

* all off: Cascade Mask R-CNN, both branches of stage ``t`` pool on the boxes
  that entered the stage (``T=1`` gives Mask R-CNN);
* ``interleaved``: the mask branch pools on the boxes the stage's box head just
  regressed;
* ``mask_info_flow``: stage ``t`` re-runs the conv trunks of mask heads
  ``1..t-1`` on its own RoIs and adds a 1x1 embedding of the last trunk output
  to its pooled features;
* ``semantic_fusion``: RoI-pooled semantic features are added to the box and/or
  mask features.

Boxes used for pooling are plain numpy arrays, so no gradient flows through
box coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import LINEAR_GAIN, SEMANTIC_STRIDE, Backbone, FeaturePyramid, SemanticBranch, SemanticFeatureMap
from .config import PipelineConfig
from .diffcore import Conv2d, Deconv2d, Linear, Module, ModuleList, no_grad, ops
from .diffcore.tensor import Tensor
from .proposals import AssignedBatch, assign_and_sample, crop_mask_targets, fix_degenerate, generate_proposals
from .roi import decode_deltas, encode_deltas, nms, pyramid_roi_align, roi_align

BOX_POOL = 7
MASK_POOL = 14
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


@dataclass
class BoxHeadOutput:
    class_logits: Tensor  # [R, num_classes + 1]
    deltas: Tensor  # [R, 4], normalised by the stage's delta_std


@dataclass
class MaskHeadState:
    m_minus: Tensor  # [R, C, 14, 14]
    mask_logits: Optional[Tensor] = None  # [R, num_classes, 28, 28]


class BoxHead(Module):
    def __init__(self, rng, channels: int, num_classes: int, fc_width: int = 256, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(channels * BOX_POOL * BOX_POOL, fc_width, rng, dtype=dtype)
        self.fc2 = Linear(fc_width, fc_width, rng, dtype=dtype)
        self.cls = Linear(fc_width, num_classes + 1, rng, init_std=0.01, dtype=dtype)
        self.reg = Linear(fc_width, 4, rng, init_std=0.001, dtype=dtype)

    def forward(self, x_box: Tensor) -> BoxHeadOutput:
        if x_box.ndim != 4 or x_box.shape[2:] != (BOX_POOL, BOX_POOL):
            raise ValueError(f"box head expects [R, C, {BOX_POOL}, {BOX_POOL}] features, got {x_box.shape}")
        h = ops.relu(self.fc1(ops.flatten(x_box)))
        h = ops.relu(self.fc2(h))
        return BoxHeadOutput(self.cls(h), self.reg(h))


class MaskHead(Module):
    """Four 3x3 convs (the trunk producing ``m_minus``), then deconv and 1x1 logits.

    ``embed`` is the 1x1 conv that maps the previous stage's ``m_minus`` into
    this stage's feature space; it exists only when information flow is on.
    """

    def __init__(self, rng, channels: int, num_classes: int, with_embed: bool, num_convs: int = 4, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.embed = Conv2d(channels, channels, 1, rng, dtype=dtype, gain=LINEAR_GAIN) if with_embed else None
        self.convs = ModuleList([Conv2d(channels, channels, 3, rng, dtype=dtype) for _ in range(num_convs)])
        self.upsample = Deconv2d(channels, channels, rng, stride=2, dtype=dtype)
        self.logits = Conv2d(channels, num_classes, 1, rng, dtype=dtype, init_std=0.01)

    def transform(self, x_mask: Tensor, prev: Optional[Tensor] = None) -> Tensor:
        if prev is not None:
            if self.embed is None:
                raise ValueError("this mask head has no embedding for a previous stage's features")
            want = (x_mask.shape[0], self.channels, MASK_POOL, MASK_POOL)
            if prev.shape != want:
                raise ValueError(f"previous mask features have shape {prev.shape}, expected {want}")
            x_mask = ops.add(x_mask, self.embed(prev))
        x = x_mask
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x

    def predict(self, m_minus: Tensor) -> Tensor:
        return self.logits(ops.relu(self.upsample(m_minus)))

    def forward(self, x_mask: Tensor, prev: Optional[Tensor] = None) -> MaskHeadState:
        m = self.transform(x_mask, prev)
        return MaskHeadState(m, self.predict(m))


@dataclass
class StageOutput:
    stage: int
    rois: np.ndarray  # [R, 5] (image index, box) the box head pooled on, i.e. r_{t-1}
    labels: np.ndarray  # [R]
    box_targets: np.ndarray  # [P, 4] normalised deltas for the positives (rows 0..P-1 of each image block)
    pos_index: np.ndarray  # [P] row indices of positives into ``rois``
    box: BoxHeadOutput
    refined: np.ndarray  # [R, 4] decoded r_t, detached
    mask_rois: np.ndarray  # [P, 5] boxes the mask branch pooled on
    mask_labels: np.ndarray  # [P] class ids 1..K
    mask_targets: np.ndarray  # [P, 28, 28]
    mask_logits: Optional[Tensor]  # [P, K, 28, 28]
    assigned: list = field(default_factory=list)  # AssignedBatch per image


@dataclass
class TrainOutputs:
    stages: list  # StageOutput per stage
    semantic_logits: Optional[Tensor]
    stuff_target: Optional[np.ndarray]


@dataclass
class Detections:
    boxes: np.ndarray  # [D, 4]
    labels: np.ndarray  # [D] in 1..K
    scores: np.ndarray  # [D]
    stage_scores: np.ndarray  # [D, T] class probability from each stage's classifier
    mask_probs: np.ndarray  # [D, T, 28, 28] per-stage sigmoid mask probabilities
    image_size: tuple

    def __len__(self) -> int:
        return len(self.labels)

    def masks(self, stage: Optional[int] = None, threshold: float = 0.5) -> np.ndarray:
        """Full-image binary masks from the stage-averaged (``stage=None``) or a single stage's probabilities."""
        probs = self.mask_probs.mean(axis=1) if stage is None else self.mask_probs[:, stage]
        return paste_masks(probs, self.boxes, self.image_size, threshold)


def paste_masks(probs: np.ndarray, boxes: np.ndarray, image_size, threshold: float = 0.5) -> np.ndarray:
    """Bilinearly resize each ``[M, M]`` probability map into its box and binarise."""
    h, w = image_size
    n = len(boxes)
    if n == 0:
        return np.zeros((0, h, w), dtype=np.uint8)
    m = probs.shape[-1]

    def axis_weights(lo, hi, size):
        centres = np.arange(size) + 0.5
        inside = (centres[None] >= lo[:, None]) & (centres[None] < hi[:, None])
        u = (centres[None] - lo[:, None]) / np.maximum(hi - lo, 1e-6)[:, None] * m - 0.5
        u = u.clip(0, m - 1)
        i0 = np.floor(u).astype(np.int64)
        i1 = np.minimum(i0 + 1, m - 1)
        f = u - i0
        wts = np.zeros((n, size, m))
        rows = np.repeat(np.arange(n), size)
        cols = np.tile(np.arange(size), n)
        np.add.at(wts, (rows, cols, i0.reshape(-1)), (1 - f).reshape(-1))
        np.add.at(wts, (rows, cols, i1.reshape(-1)), f.reshape(-1))
        return wts * inside[..., None]

    ay = axis_weights(boxes[:, 1], boxes[:, 3], h)
    ax = axis_weights(boxes[:, 0], boxes[:, 2], w)
    full = ay @ probs.astype(np.float64) @ ax.transpose(0, 2, 1)
    return (full >= threshold).astype(np.uint8)


def _with_index(index: int, boxes: np.ndarray) -> np.ndarray:
    return np.concatenate([np.full((len(boxes), 1), float(index)), boxes], axis=1)


class HybridTaskCascade(Module):
    def __init__(self, cfg: PipelineConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.backbone = Backbone(rng, cfg.backbone_widths, c, dtype)
        self.semantic = SemanticBranch(rng, c, cfg.num_stuff_classes, dtype=dtype) if cfg.semantic_branch else None
        self.box_heads = ModuleList([BoxHead(rng, c, cfg.num_classes, cfg.fc_width, dtype) for _ in range(cfg.num_stages)])
        self.mask_heads = ModuleList(
            [MaskHead(rng, c, cfg.num_classes, with_embed=cfg.mask_info_flow and t > 0, dtype=dtype) for t in range(cfg.num_stages)]
        )
        self.assign_names()

    # -- shared pieces --------------------------------------------------------
    def extract(self, images: np.ndarray) -> tuple[FeaturePyramid, Optional[SemanticFeatureMap]]:
        x = Tensor(((np.asarray(images) - IMAGE_MEAN) / IMAGE_STD).astype(self.dtype))
        pyr = self.backbone(x)
        sem = self.semantic(pyr) if self.semantic is not None else None
        return pyr, sem

    def _pool(self, pyr, sem, rois5, size, fuse, image_size) -> Tensor:
        x = pyramid_roi_align(pyr.as_list(), pyr.strides, rois5, size, image_size)
        if fuse and sem is not None:
            x = ops.add(x, roi_align(sem.features, rois5, size, 1.0 / SEMANTIC_STRIDE))
        return x

    def pool_box(self, pyr, sem, rois5, image_size) -> Tensor:
        return self._pool(pyr, sem, rois5, BOX_POOL, self.cfg.fuse_bbox, image_size)

    def pool_mask(self, pyr, sem, rois5, image_size) -> Tensor:
        return self._pool(pyr, sem, rois5, MASK_POOL, self.cfg.fuse_mask, image_size)

    def mask_trunk(self, t: int, x_mask: Tensor) -> Tensor:
        """``m_minus`` of stage ``t``; with information flow, trunks 0..t-1 are re-run on ``x_mask``."""
        if not self.cfg.mask_info_flow or t == 0:
            return self.mask_heads[t].transform(x_mask)
        last = None
        for i in range(t + 1):
            last = self.mask_heads[i].transform(x_mask, last)
        return last

    def decode(self, t: int, boxes: np.ndarray, deltas: np.ndarray, image_size) -> np.ndarray:
        std = np.asarray(self.cfg.stages[t].delta_std)
        return fix_degenerate(decode_deltas(boxes, deltas.astype(np.float64) * std, image_size), image_size)

    # -- training -------------------------------------------------------------
    def initial_proposals(self, samples, seed) -> list[np.ndarray]:
        pc = self.cfg.proposals
        out = []
        for i, smp in enumerate(samples):
            props = generate_proposals(
                smp.boxes, smp.size, [seed, i, 0], pc.n_jitter, pc.n_random, pc.center_sigma, pc.scale_sigma
            )
            if pc.add_gt:
                props = np.concatenate([smp.boxes, props])
            out.append(props)
        return out

    def forward_train(self, samples: Sequence, seed: int = 0, proposals: Optional[list] = None) -> TrainOutputs:
        cfg = self.cfg
        images = np.stack([s.image for s in samples])
        image_size = images.shape[2:]
        pyr, sem = self.extract(images)
        candidates = self.initial_proposals(samples, seed) if proposals is None else proposals
        stages = []
        for t in range(cfg.num_stages):
            scfg = cfg.stages[t]
            assigned: list[AssignedBatch] = []
            blocks, pos_index, targets = [], [], []
            offset = 0
            for i, smp in enumerate(samples):
                a = assign_and_sample(candidates[i], smp.boxes, smp.labels, smp.masks, scfg, [seed, i, t + 1], cfg.mask_resolution)
                assigned.append(a)
                blocks.append(_with_index(i, a.rois))
                pos_index.append(offset + np.arange(a.num_pos))
                targets.append(a.box_targets / np.asarray(scfg.delta_std))
                offset += len(a.rois)
            rois5 = np.concatenate(blocks)
            labels = np.concatenate([a.labels for a in assigned])
            pos_index = np.concatenate(pos_index).astype(np.int64)
            box_targets = np.concatenate(targets)

            box_out = self.box_heads[t](self.pool_box(pyr, sem, rois5, image_size))
            refined = self.decode(t, rois5[:, 1:], box_out.deltas.data, image_size)

            if cfg.interleaved:
                mask_boxes = refined[pos_index]
            else:
                mask_boxes = rois5[pos_index, 1:]
            mask_rois = np.concatenate([rois5[pos_index, :1], mask_boxes], axis=1)
            mask_labels = labels[pos_index]
            if cfg.interleaved:
                mask_targets = []
                row = 0
                for i, (smp, a) in enumerate(zip(samples, assigned)):
                    gt_idx = a.matched_gt[: a.num_pos]
                    mask_targets.append(crop_mask_targets(smp.masks[gt_idx], mask_boxes[row : row + a.num_pos], cfg.mask_resolution))
                    row += a.num_pos
                mask_targets = np.concatenate(mask_targets) if mask_targets else np.zeros((0, 28, 28), np.uint8)
            else:
                mask_targets = np.concatenate([a.mask_targets for a in assigned])

            mask_logits = None
            if len(pos_index):
                x_mask = self.pool_mask(pyr, sem, mask_rois, image_size)
                mask_logits = self.mask_heads[t].predict(self.mask_trunk(t, x_mask))

            stages.append(
                StageOutput(
                    stage=t,
                    rois=rois5,
                    labels=labels,
                    box_targets=box_targets,
                    pos_index=pos_index,
                    box=box_out,
                    refined=refined,
                    mask_rois=mask_rois,
                    mask_labels=mask_labels,
                    mask_targets=mask_targets,
                    mask_logits=mask_logits,
                    assigned=assigned,
                )
            )
            candidates = [refined[rois5[:, 0] == i] for i in range(len(samples))]

        stuff_target = None
        sem_logits = None
        if sem is not None:
            sem_logits = sem.logits
            half = SEMANTIC_STRIDE // 2
            stuff_target = np.stack([s.stuff[half::SEMANTIC_STRIDE, half::SEMANTIC_STRIDE] for s in samples]).astype(np.int64)
        return TrainOutputs(stages, sem_logits, stuff_target)

    # -- inference ------------------------------------------------------------
    def predict(self, images: np.ndarray, proposals: list) -> list[Detections]:
        """Refine ``proposals`` through every stage, score with all stage classifiers, run NMS and the mask heads."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        image_size = tuple(images.shape[2:])
        with no_grad():
            pyr, sem = self.extract(images)
            rois5 = np.concatenate([_with_index(i, np.asarray(p, dtype=np.float64)) for i, p in enumerate(proposals)])
            boxes = rois5[:, 1:]
            for t in range(cfg.num_stages):
                out = self.box_heads[t](self.pool_box(pyr, sem, np.concatenate([rois5[:, :1], boxes], axis=1), image_size))
                boxes = self.decode(t, boxes, out.deltas.data, image_size)
            final5 = np.concatenate([rois5[:, :1], boxes], axis=1)
            x_box = self.pool_box(pyr, sem, final5, image_size)
            stage_probs = np.stack([ops.softmax(head(x_box).class_logits, axis=1).data for head in self.box_heads], axis=1)
            probs = stage_probs.mean(axis=1)

            results = []
            for i in range(len(images)):
                rows = np.nonzero(rois5[:, 0] == i)[0]
                det_rows, det_labels, det_scores = [], [], []
                for c in range(1, cfg.num_classes + 1):
                    sc = probs[rows, c]
                    cand = np.nonzero(sc > cfg.score_threshold)[0]
                    if cand.size == 0:
                        continue
                    kept = cand[nms(boxes[rows[cand]], sc[cand], cfg.nms_iou)]
                    det_rows.append(rows[kept])
                    det_labels.append(np.full(len(kept), c))
                    det_scores.append(sc[kept])
                if det_rows:
                    det_rows = np.concatenate(det_rows)
                    det_labels = np.concatenate(det_labels)
                    det_scores = np.concatenate(det_scores)
                    order = np.argsort(-det_scores, kind="stable")[: cfg.max_detections]
                    det_rows, det_labels, det_scores = det_rows[order], det_labels[order], det_scores[order]
                else:
                    det_rows = np.zeros(0, np.int64)
                    det_labels = np.zeros(0, np.int64)
                    det_scores = np.zeros(0)
                st_scores = stage_probs[det_rows, :, det_labels] if len(det_rows) else np.zeros((0, cfg.num_stages))
                results.append(
                    Detections(boxes[det_rows], det_labels.astype(np.int64), det_scores, st_scores, None, image_size)
                )

            all_rows = [np.concatenate([np.full((len(d), 1), float(i)), d.boxes], axis=1) for i, d in enumerate(results)]
            det5 = np.concatenate(all_rows) if all_rows else np.zeros((0, 5))
            res = cfg.mask_resolution
            if len(det5):
                x_mask = self.pool_mask(pyr, sem, det5, image_size)
                labels = np.concatenate([d.labels for d in results])
                per_stage = []
                last = None
                for t, head in enumerate(self.mask_heads):
                    prev = last if (cfg.mask_info_flow and t > 0) else None
                    last = head.transform(x_mask, prev)
                    logits = head.predict(last).data
                    per_stage.append(_sigmoid(logits[np.arange(len(labels)), labels - 1]))
                mask_probs = np.stack(per_stage, axis=1)
            else:
                mask_probs = np.zeros((0, cfg.num_stages, res, res))
            start = 0
            for d in results:
                d.mask_probs = mask_probs[start : start + len(d)].astype(np.float64)
                start += len(d)
        return results


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ensemble_scores(stage_scores) -> np.ndarray:
    """Mean over the stage axis (last axis) of per-stage class scores."""
    return np.asarray(stage_scores, dtype=np.float64).mean(axis=-1)


def ensemble_masks(stage_probs) -> np.ndarray:
    """Average per-stage mask probabilities over axis 1 ([D, T, M, M] -> [D, M, M])."""
    return np.asarray(stage_probs, dtype=np.float64).mean(axis=1)
