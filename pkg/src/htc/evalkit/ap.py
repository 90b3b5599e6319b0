"""COCO-style average precision for boxes and masks.

Follows the reference COCO evaluator: greedy score-ordered matching per image
and category, 10 IoU thresholds 0.50:0.05:0.95, 101-point interpolated
precision, at most 100 detections per image, crowd and out-of-range GTs
ignored.  Area ranges can be rescaled for images smaller than COCO's.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..roi import box_iou
from .rle import RleMask, mask_iou_matrix, rle_decode, rle_encode

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
COCO_AREA_RANGES = {"all": (0.0, 1e10), "small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}


@dataclass(frozen=True)
class EvalResult:
    """AP values in [0, 1]; -1 marks a metric with no ground truth to score against."""

    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float

    def as_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AP_S": self.ap_s, "AP_M": self.ap_m, "AP_L": self.ap_l}


def area_ranges(area_scale: float = 1.0) -> dict:
    return {k: (lo * area_scale, hi if hi >= 1e10 else hi * area_scale) for k, (lo, hi) in COCO_AREA_RANGES.items()}


def interpolated_precision(scores, is_tp, n_gt: int, ignore=None) -> np.ndarray:
    """101-point precision curve for one (category, IoU threshold) pool of detections.

    Detections flagged in ``ignore`` count as neither TP nor FP.  Returns -1s
    when ``n_gt == 0``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    ignore = np.zeros_like(is_tp) if ignore is None else np.asarray(ignore, dtype=bool)
    if n_gt == 0:
        return -np.ones(len(RECALL_THRESHOLDS))
    order = np.argsort(-scores, kind="mergesort")
    tp = is_tp[order] & ~ignore[order]
    fp = ~is_tp[order] & ~ignore[order]
    tp_sum = np.cumsum(tp).astype(np.float64)
    fp_sum = np.cumsum(fp).astype(np.float64)
    rc = tp_sum / n_gt
    pr = tp_sum / (tp_sum + fp_sum + np.spacing(1))
    # envelope: precision at recall r is the best precision at any recall >= r
    pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    idx = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
    out = np.zeros(len(RECALL_THRESHOLDS))
    valid = idx < len(pr)
    out[valid] = pr[idx[valid]]
    return out


def average_precision(scores, is_tp, n_gt: int, ignore=None) -> float:
    """Mean of the 101-point interpolated precision; -1 when there is no ground truth."""
    if n_gt == 0:
        return -1.0
    return float(interpolated_precision(scores, is_tp, n_gt, ignore).mean())


def _ious(iou_type, dts, gts, crowd):
    if iou_type == "bbox":
        d = np.array([_xyxy(x["bbox"]) for x in dts]).reshape(-1, 4)
        g = np.array([_xyxy(x["bbox"]) for x in gts]).reshape(-1, 4)
        ious = box_iou(d, g)
        if crowd.any():
            inter = _box_inter(d, g)
            d_area = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
            ious[:, crowd] = (inter / np.maximum(d_area, 1e-12)[:, None])[:, crowd]
        return ious
    d = [_rle(x["segmentation"]) for x in dts]
    g = [_rle(x["segmentation"]) for x in gts]
    ious = mask_iou_matrix(d, g)
    if crowd.any() and len(d):
        dm = np.stack([rle_decode(r).reshape(-1) for r in d]).astype(np.float64)
        gm = np.stack([rle_decode(r).reshape(-1) for r in g]).astype(np.float64)
        inter = dm @ gm.T
        ious[:, crowd] = (inter / np.maximum(dm.sum(1), 1)[:, None])[:, crowd]
    return ious


def _box_inter(a, b):
    w = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    h = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    return w * h


def _xyxy(b):
    x, y, w, h = b
    return [x, y, x + w, y + h]


def _rle(seg) -> RleMask:
    return seg if isinstance(seg, RleMask) else RleMask.from_json(seg)


def _det_area(iou_type, det) -> float:
    if "area" in det:
        return float(det["area"])
    if iou_type == "bbox":
        return float(det["bbox"][2] * det["bbox"][3])
    return float(_rle(det["segmentation"]).area)


def match_image(iou_type, dts, gts, area_rng, iou_thresholds=IOU_THRESHOLDS, max_dets=MAX_DETS):
    """Greedy matching of one image/category; returns (scores, matched[T, D], ignored[T, D], n_gt_not_ignored)."""
    lo, hi = area_rng
    g_ignore = np.array([bool(g.get("iscrowd", 0)) or not (lo <= g["area"] <= hi) for g in gts], dtype=bool)
    g_order = np.argsort(g_ignore, kind="mergesort")
    gts = [gts[i] for i in g_order]
    g_ignore = g_ignore[g_order]
    crowd = np.array([bool(g.get("iscrowd", 0)) for g in gts], dtype=bool)
    d_order = np.argsort([-d["score"] for d in dts], kind="mergesort")[:max_dets]
    dts = [dts[i] for i in d_order]
    nt, nd, ng = len(iou_thresholds), len(dts), len(gts)
    matched = np.zeros((nt, nd), dtype=bool)
    d_ignore = np.zeros((nt, nd), dtype=bool)
    if nd and ng:
        ious = _ious(iou_type, dts, gts, crowd)
        for ti, thr in enumerate(iou_thresholds):
            g_taken = np.zeros(ng, dtype=bool)
            for di in range(nd):
                best = min(thr, 1 - 1e-10)
                m = -1
                for gi in range(ng):
                    if g_taken[gi] and not crowd[gi]:
                        continue
                    # non-ignored match found and the rest are ignored GTs
                    if m > -1 and not g_ignore[m] and g_ignore[gi]:
                        break
                    if ious[di, gi] < best:
                        continue
                    best = ious[di, gi]
                    m = gi
                if m == -1:
                    continue
                d_ignore[ti, di] = g_ignore[m]
                matched[ti, di] = True
                g_taken[m] = True
    d_area = np.array([_det_area(iou_type, d) for d in dts])
    out_of_range = (d_area < lo) | (d_area > hi) if nd else np.zeros(0, dtype=bool)
    d_ignore |= ~matched & out_of_range[None, :]
    scores = np.array([d["score"] for d in dts], dtype=np.float64)
    return scores, matched, d_ignore, int((~g_ignore).sum())


def evaluate(gt: dict, results: Iterable[dict], iou_type: str = "segm", area_scale: float = 1.0) -> EvalResult:
    """Score ``results`` (COCO result dicts) against a COCO ground-truth dict."""
    if iou_type not in ("bbox", "segm"):
        raise ValueError(f"iou_type must be 'bbox' or 'segm', got {iou_type!r}")
    results = list(results)
    image_ids = [im["id"] for im in gt["images"]]
    known = set(image_ids)
    cat_ids = [c["id"] for c in gt["categories"]]
    gts_by = defaultdict(list)
    for a in gt["annotations"]:
        gts_by[a["image_id"], a["category_id"]].append(a)
    dts_by = defaultdict(list)
    for r in results:
        if r["image_id"] not in known:
            raise ValueError(f"result refers to unknown image_id {r['image_id']}")
        if iou_type == "segm" and "segmentation" not in r:
            raise ValueError("segm evaluation needs 'segmentation' in every result")
        dts_by[r["image_id"], r["category_id"]].append(r)

    ranges = area_ranges(area_scale)
    summary = {}
    for name, rng in ranges.items():
        # precision[T, C, 101]
        prec = -np.ones((len(IOU_THRESHOLDS), len(cat_ids), len(RECALL_THRESHOLDS)))
        for ci, cat in enumerate(cat_ids):
            scores, matched, ignored, n_gt = [], [], [], 0
            for img in image_ids:
                s, m, ig, n = match_image(iou_type, dts_by[img, cat], gts_by[img, cat], rng)
                scores.append(s)
                matched.append(m)
                ignored.append(ig)
                n_gt += n
            if n_gt == 0:
                continue
            s = np.concatenate(scores)
            m = np.concatenate(matched, axis=1)
            ig = np.concatenate(ignored, axis=1)
            for ti in range(len(IOU_THRESHOLDS)):
                prec[ti, ci] = interpolated_precision(s, m[ti], n_gt, ig[ti])
        summary[name] = prec

    def mean_valid(p):
        v = p[p > -1]
        return float(v.mean()) if v.size else -1.0

    full = summary["all"]
    return EvalResult(
        ap=mean_valid(full),
        ap50=mean_valid(full[0]),
        ap75=mean_valid(full[5]),
        ap_s=mean_valid(summary["small"]),
        ap_m=mean_valid(summary["medium"]),
        ap_l=mean_valid(summary["large"]),
    )


def results_from_arrays(image_id: int, boxes, labels, scores, masks: Optional[np.ndarray] = None) -> list[dict]:
    """COCO result dicts from xyxy boxes and optional binary full-image masks."""
    out = []
    for k in range(len(labels)):
        x1, y1, x2, y2 = (float(v) for v in boxes[k])
        r = {"image_id": int(image_id), "category_id": int(labels[k]), "bbox": [x1, y1, x2 - x1, y2 - y1], "score": float(scores[k])}
        if masks is not None:
            r["segmentation"] = rle_encode(masks[k]).to_json()
        out.append(r)
    return out
