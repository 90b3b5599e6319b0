"""Synthetic shapes with instance masks and stuff maps, plus COCO-style disk I/O.

Each image has a sky band above a wavy horizon, a ground band below it and a
patch of noise texture.  Circles, squares and triangles are composited on top
with anti-aliasing; instance masks come from the same analytic coverage that
drives the rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .evalkit.rle import RleMask, rle_decode, rle_encode

THING_CLASSES = ("circle", "square", "triangle")
# label 0 is the catch-all: pixels of object instances carry it
STUFF_CLASSES = ("background", "sky", "ground", "texture")
NUM_THING_CLASSES = len(THING_CLASSES)
NUM_STUFF_CLASSES = len(STUFF_CLASSES)
DIFFICULTIES = ("easy", "hard")

_SUPERSAMPLE = 4
_MIN_VISIBLE_AREA = 30


@dataclass
class InstanceSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1], multiples of 1/255
    boxes: np.ndarray  # [K, 4] float64, tight around the visible mask
    labels: np.ndarray  # [K] int64 in 1..3
    masks: np.ndarray  # [K, H, W] uint8
    stuff: np.ndarray  # [H, W] uint8 in 0..3
    image_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def shape_area(kind: str, size: float) -> float:
    """Analytic area; ``size`` is the diameter (circle), side (square) or circumdiameter (triangle)."""
    if kind == "circle":
        return np.pi * (size / 2) ** 2
    if kind == "square":
        return size**2
    if kind == "triangle":
        r = size / 2
        return 3 * np.sqrt(3) / 4 * r**2
    raise ValueError(f"unknown shape {kind!r}")


def _inside(kind: str, px: np.ndarray, py: np.ndarray, cx: float, cy: float, size: float, angle: float) -> np.ndarray:
    dx, dy = px - cx, py - cy
    c, s = np.cos(-angle), np.sin(-angle)
    u, v = c * dx - s * dy, s * dx + c * dy
    if kind == "circle":
        return u * u + v * v <= (size / 2) ** 2
    if kind == "square":
        return (np.abs(u) <= size / 2) & (np.abs(v) <= size / 2)
    r = size / 2
    inside = np.ones(px.shape, dtype=bool)
    # equilateral triangle: three half-planes at distance r/2 from the centre
    for k in range(3):
        theta = np.pi / 2 + k * 2 * np.pi / 3
        inside &= u * np.cos(theta) + v * np.sin(theta) <= r / 2
    return inside


def coverage(kind: str, height: int, width: int, cx: float, cy: float, size: float, angle: float) -> np.ndarray:
    """Fraction of each pixel covered by the shape, from a 4x4 sub-pixel grid."""
    ss = _SUPERSAMPLE
    out = np.zeros((height, width), dtype=np.float32)
    reach = size * 0.75 + 2
    y0, y1 = max(int(cy - reach), 0), min(int(cy + reach) + 1, height)
    x0, x1 = max(int(cx - reach), 0), min(int(cx + reach) + 1, width)
    if y1 <= y0 or x1 <= x0:
        return out
    sub = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).reshape(-1)
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).reshape(-1)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    hit = _inside(kind, px, py, cx, cy, size, angle)
    hit = hit.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    out[y0:y1, x0:x1] = hit
    return out


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _background(rng: np.random.Generator, h: int, w: int, difficulty: str) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    horizon = h * rng.uniform(0.35, 0.65) + h * 0.06 * np.sin(2 * np.pi * (xx[0] / w * rng.uniform(0.5, 2.0) + rng.uniform()))
    sky = yy < horizon[None, :]
    stuff = np.where(sky, 1, 2).astype(np.uint8)

    sky_col = np.array([0.45, 0.6, 0.85]) + rng.uniform(-0.1, 0.1, 3)
    ground_col = np.array([0.45, 0.38, 0.25]) + rng.uniform(-0.1, 0.1, 3)
    grad = (yy / h)[None]
    img = np.where(sky[None], sky_col[:, None, None] * (1.0 - 0.3 * grad), ground_col[:, None, None] * (0.8 + 0.3 * grad))
    noise_amp = 0.03 if difficulty == "easy" else 0.07
    img = img + rng.normal(0, noise_amp, size=(1, h, w))

    n_patches = 1 if difficulty == "easy" else 2
    for _ in range(n_patches):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ry, rx = rng.uniform(0.08, 0.2) * h, rng.uniform(0.08, 0.2) * w
        patch = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        stripes = 0.5 + 0.5 * np.sign(np.sin((xx + yy) * rng.uniform(0.8, 1.6)))
        amp = 0.25 if difficulty == "easy" else 0.4
        tex = (0.35 + amp * stripes)[None] + rng.normal(0, 0.05, size=(3, h, w))
        img = np.where(patch[None], tex, img)
        stuff[patch] = 3
    return img, stuff


def _random_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.uniform()
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
    rgb = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
    return 0.15 + 0.85 * rgb


def generate_sample(seed: int, image_size: int = 128, n_instances_range: tuple[int, int] = (1, 4), difficulty: str = "easy") -> InstanceSample:
    """Render one synthetic image; fully determined by ``seed``."""
    if image_size % 32 != 0 or image_size <= 0:
        raise ValueError(f"image_size must be a positive multiple of 32, got {image_size}")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    lo, hi = n_instances_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid n_instances_range {n_instances_range}")
    rng = np.random.default_rng(seed)
    h = w = image_size
    img, stuff = _background(rng, h, w, difficulty)

    target = int(rng.integers(lo, hi + 1))
    size_range = (0.15, 0.35) if difficulty == "easy" else (0.1, 0.4)
    max_occlusion = 0.0 if difficulty == "easy" else 0.5

    centres_y, centres_x = np.mgrid[0:h, 0:w] + 0.5
    shapes = []  # (kind index, coverage, visible binary mask)
    geometry = []
    attempts = 0
    kind = None
    while len(shapes) < target and attempts < 200:
        attempts += 1
        # the class is drawn once per instance so that placement retries do not skew it
        if kind is None:
            kind = int(rng.integers(0, NUM_THING_CLASSES))
        size = rng.uniform(*size_range) * image_size
        reach = size / np.sqrt(2) if kind == 1 else size / 2
        cx, cy = rng.uniform(reach, w - reach), rng.uniform(reach, h - reach)
        angle = rng.uniform(0, 2 * np.pi)
        # a pixel belongs to the shape when its centre does (unbiased at edges)
        full = _inside(THING_CLASSES[kind], centres_x, centres_y, cx, cy, size, angle)
        if full.sum() < _MIN_VISIBLE_AREA:
            continue
        ok = True
        for _, _, vis in shapes:
            hidden = (vis & full).sum() / max(vis.sum(), 1)
            if max_occlusion == 0.0:
                # keep a one-pixel gap between shapes on the easy set
                grown = np.zeros_like(full)
                grown[:-1] |= full[1:]
                grown[1:] |= full[:-1]
                grown[:, :-1] |= full[:, 1:]
                grown[:, 1:] |= full[:, :-1]
                if (vis & (grown | full)).any():
                    ok = False
                    break
            elif hidden > max_occlusion or (vis & ~full).sum() < _MIN_VISIBLE_AREA:
                ok = False
                break
        if not ok:
            continue
        cov = coverage(THING_CLASSES[kind], h, w, cx, cy, size, angle)
        shapes = [(k, c, v & ~full) for k, c, v in shapes]
        shapes.append((kind, cov, full.copy()))
        geometry.append({"kind": THING_CLASSES[kind], "cx": cx, "cy": cy, "size": size, "angle": angle})
        kind = None

    for kind, cov, _ in shapes:
        color = _random_color(rng)
        img = (1.0 - cov[None]) * img + cov[None] * color[:, None, None]

    img = np.round(np.clip(img, 0, 1) * 255) / 255.0
    masks = np.stack([v for _, _, v in shapes]).astype(np.uint8) if shapes else np.zeros((0, h, w), np.uint8)
    for m in masks:
        stuff[m.astype(bool)] = 0
    labels = np.array([k + 1 for k, _, _ in shapes], dtype=np.int64)
    boxes = np.stack([mask_to_box(m) for m in masks]) if len(masks) else np.zeros((0, 4))
    return InstanceSample(
        image=img.astype(np.float32),
        boxes=boxes,
        labels=labels,
        masks=masks,
        stuff=stuff,
        image_id=int(seed),
        meta={"difficulty": difficulty, "shapes": geometry},
    )


def generate_dataset(n: int, seed: int, image_size: int = 128, n_instances_range=(1, 4), difficulty: str = "easy") -> list[InstanceSample]:
    base = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    samples = []
    for i, s in enumerate(base):
        smp = generate_sample(int(s), image_size, n_instances_range, difficulty)
        smp.image_id = i + 1
        samples.append(smp)
    return samples


# ---------------------------------------------------------------------------
# COCO-style I/O
# ---------------------------------------------------------------------------


def categories() -> list[dict]:
    return [{"id": i + 1, "name": name, "supercategory": "shape"} for i, name in enumerate(THING_CLASSES)]


def to_coco(samples: Sequence[InstanceSample]) -> dict:
    images, anns = [], []
    ann_id = 1
    for smp in samples:
        h, w = smp.size
        stem = f"{smp.image_id:06d}.png"
        images.append({"id": smp.image_id, "file_name": stem, "stuff_file": stem, "height": h, "width": w})
        for box, label, mask in zip(smp.boxes, smp.labels, smp.masks):
            rle = rle_encode(mask)
            anns.append(
                {
                    "id": ann_id,
                    "image_id": smp.image_id,
                    "category_id": int(label),
                    "bbox": [float(box[0]), float(box[1]), float(box[2] - box[0]), float(box[3] - box[1])],
                    "area": int(rle.area),
                    "segmentation": rle.to_json(),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {"images": images, "annotations": anns, "categories": categories()}


def write_coco_json(samples: Sequence[InstanceSample], root, info: Optional[dict] = None) -> Path:
    """Write ``{root}/images``, ``{root}/stuff`` and ``{root}/annotations.json``.

    ``info`` is stored under the document's ``info`` key (generation parameters).
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "stuff").mkdir(parents=True, exist_ok=True)
    ids = [s.image_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    doc = to_coco(samples)
    if info is not None:
        doc["info"] = info
    for smp, meta in zip(samples, doc["images"]):
        rgb = np.round(smp.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / meta["file_name"])
        Image.fromarray(smp.stuff.astype(np.uint8), mode="L").save(root / "stuff" / meta["stuff_file"])
    out = root / "annotations.json"
    out.write_text(json.dumps(doc, sort_keys=True))
    return out


def read_coco_json(root) -> list[InstanceSample]:
    root = Path(root)
    ann_path = root / "annotations.json"
    try:
        doc = json.loads(ann_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"annotation file not found: {ann_path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed annotation file {ann_path}: {e}") from None
    for key in ("images", "annotations"):
        if key not in doc:
            raise ValueError(f"malformed annotation file {ann_path}: missing {key!r}")
    by_image: dict[int, list] = {img["id"]: [] for img in doc["images"]}
    for ann in doc["annotations"]:
        if ann["image_id"] not in by_image:
            raise ValueError(f"{ann_path}: annotation {ann['id']} references unknown image {ann['image_id']}")
        by_image[ann["image_id"]].append(ann)
    samples = []
    for meta in doc["images"]:
        img_path = root / "images" / meta["file_name"]
        stuff_path = root / "stuff" / meta.get("stuff_file", meta["file_name"])
        for p in (img_path, stuff_path):
            if not p.is_file():
                raise FileNotFoundError(f"missing image file {p}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        stuff = np.asarray(Image.open(stuff_path), dtype=np.uint8)
        h, w = meta["height"], meta["width"]
        anns = by_image[meta["id"]]
        boxes = np.array([[a["bbox"][0], a["bbox"][1], a["bbox"][0] + a["bbox"][2], a["bbox"][1] + a["bbox"][3]] for a in anns], dtype=np.float64).reshape(-1, 4)
        labels = np.array([a["category_id"] for a in anns], dtype=np.int64)
        masks = np.stack([rle_decode(RleMask.from_json(a["segmentation"])) for a in anns]) if anns else np.zeros((0, h, w), np.uint8)
        samples.append(InstanceSample(image=image, boxes=boxes, labels=labels, masks=masks, stuff=stuff, image_id=meta["id"]))
    return samples


def load_coco_annotations(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    return json.loads(path.read_text())


def flip_sample(smp: InstanceSample) -> InstanceSample:
    """Horizontal flip of image, masks, stuff map and boxes."""
    w = smp.image.shape[2]
    boxes = smp.boxes.copy()
    boxes[:, [0, 2]] = w - smp.boxes[:, [2, 0]]
    return InstanceSample(
        image=smp.image[:, :, ::-1].copy(),
        boxes=boxes,
        labels=smp.labels.copy(),
        masks=smp.masks[:, :, ::-1].copy(),
        stuff=smp.stuff[:, ::-1].copy(),
        image_id=smp.image_id,
        meta=dict(smp.meta),
    )
