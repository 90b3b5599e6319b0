"""Run-length mask encoding and COCO-style AP."""

from .ap import EvalResult, area_ranges, average_precision, evaluate, interpolated_precision, match_image, results_from_arrays
from .rle import RleMask, mask_iou, mask_iou_matrix, rle_area, rle_decode, rle_encode, rle_intersection

__all__ = [
    "EvalResult",
    "RleMask",
    "area_ranges",
    "average_precision",
    "evaluate",
    "interpolated_precision",
    "mask_iou",
    "mask_iou_matrix",
    "match_image",
    "results_from_arrays",
    "rle_area",
    "rle_decode",
    "rle_encode",
    "rle_intersection",
]
