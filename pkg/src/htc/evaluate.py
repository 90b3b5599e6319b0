"""Run a trained model over a dataset and score it with the COCO evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cascade import Detections, HybridTaskCascade
from .dataset import to_coco
from .evalkit import EvalResult, evaluate, results_from_arrays
from .proposals import generate_proposals

COCO_SIDE = 640.0
EVAL_PROPOSAL_STREAM = 7919


@dataclass
class ModelReport:
    box: EvalResult
    mask: EvalResult
    stage_mask: list  # EvalResult per single stage's mask probabilities

    def as_dict(self) -> dict:
        return {
            "box": self.box.as_dict(),
            "mask": self.mask.as_dict(),
            "stage_mask": [r.as_dict() for r in self.stage_mask],
        }


def eval_proposals(model: HybridTaskCascade, sample) -> np.ndarray:
    """Jittered-GT proposals for evaluation, seeded by image id (GT boxes themselves are not added)."""
    pc = model.cfg.proposals
    return generate_proposals(
        sample.boxes, sample.size, [EVAL_PROPOSAL_STREAM, sample.image_id], pc.n_jitter, pc.n_random, pc.center_sigma, pc.scale_sigma
    )


def run_detection(model: HybridTaskCascade, samples: Sequence, batch_size: int = 4) -> list[Detections]:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        images = np.stack([s.image for s in chunk])
        out.extend(model.predict(images, [eval_proposals(model, s) for s in chunk]))
    return out


def area_scale_for(samples: Sequence) -> float:
    h, w = samples[0].size
    return (h * w) / (COCO_SIDE * COCO_SIDE)


def evaluate_detections(samples: Sequence, dets: Sequence[Detections], stage: Optional[int] = None, iou_type: str = "segm") -> EvalResult:
    gt = to_coco(samples)
    results = []
    for smp, d in zip(samples, dets):
        masks = d.masks(stage) if iou_type == "segm" else None
        results.extend(results_from_arrays(smp.image_id, d.boxes, d.labels, d.scores, masks))
    return evaluate(gt, results, iou_type, area_scale_for(samples))


def evaluate_model(model: HybridTaskCascade, samples: Sequence) -> ModelReport:
    dets = run_detection(model, samples)
    box = evaluate_detections(samples, dets, iou_type="bbox")
    mask = evaluate_detections(samples, dets, iou_type="segm")
    stages = [evaluate_detections(samples, dets, stage=t) for t in range(model.cfg.num_stages)]
    return ModelReport(box, mask, stages)
