"""Uncompressed COCO run-length encoding (column-major, zero-run first)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        counts = obj["counts"]
        if isinstance(counts, str):
            raise ValueError("compressed RLE strings are not supported; expected a list of run lengths")
        return cls((int(obj["size"][0]), int(obj["size"][1])), tuple(int(c) for c in counts))

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))


def rle_encode(mask) -> RleMask:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"rle_encode: expected a 2-d mask, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("rle_encode: mask must be binary")
    flat = m.astype(np.uint8).reshape(-1, order="F")
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    if flat.size == 0:
        runs = [0]
    return RleMask((m.shape[0], m.shape[1]), tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    if sum(rle.counts) != h * w or any(c < 0 for c in rle.counts):
        raise ValueError(f"rle_decode: counts sum to {sum(rle.counts)}, expected {h * w}")
    values = np.arange(len(rle.counts)) % 2
    flat = np.repeat(values.astype(np.uint8), rle.counts)
    return flat.reshape((h, w), order="F")


def rle_area(rle: RleMask) -> int:
    return rle.area


def _runs(rle: RleMask) -> tuple[np.ndarray, np.ndarray]:
    """Start/end offsets of the one-runs."""
    ends = np.cumsum(rle.counts)
    starts = ends - np.asarray(rle.counts)
    ones = np.arange(len(rle.counts)) % 2 == 1
    return starts[ones], ends[ones]


def rle_intersection(a: RleMask, b: RleMask) -> int:
    sa, ea = _runs(a)
    sb, eb = _runs(b)
    if sa.size == 0 or sb.size == 0:
        return 0
    # pairwise overlap of sorted disjoint intervals via merge
    total, i, j = 0, 0, 0
    while i < sa.size and j < sb.size:
        lo, hi = max(sa[i], sb[j]), min(ea[i], eb[j])
        if hi > lo:
            total += hi - lo
        if ea[i] < eb[j]:
            i += 1
        else:
            j += 1
    return int(total)


def mask_iou(a: RleMask, b: RleMask) -> float:
    if a.size != b.size:
        raise ValueError(f"mask_iou: size mismatch {a.size} vs {b.size}")
    inter = rle_intersection(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def mask_iou_matrix(dets, gts) -> np.ndarray:
    """Pairwise IoU ``[D, G]``, computed on decoded masks."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d = np.stack([rle_decode(r).reshape(-1) for r in dets]).astype(np.float64)
    g = np.stack([rle_decode(r).reshape(-1) for r in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)
