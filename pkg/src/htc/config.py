"""Pipeline, training and run configuration.

All models reject unknown keys.  ``config_hash`` fingerprints the pipeline so
checkpoints can refuse to load into a differently-shaped model.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

FusionMode = Literal["none", "bbox", "mask", "both"]

# target normalisation per stage, as used by Cascade R-CNN
DEFAULT_IOU_THRESHOLDS = (0.5, 0.6, 0.7)
DEFAULT_ALPHA = (1.0, 0.5, 0.25)
DEFAULT_DELTA_STDS = ((0.1, 0.1, 0.2, 0.2), (0.05, 0.05, 0.1, 0.1), (0.033, 0.033, 0.067, 0.067))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StageConfig(_Strict):
    index: int = Field(ge=0)
    iou_threshold: float = Field(gt=0.0, lt=1.0)
    loss_weight: float = Field(gt=0.0)
    samples_per_image: int = Field(default=64, ge=1)
    positive_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    delta_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)


def default_stages(num_stages: int = 3) -> list[StageConfig]:
    out = []
    for t in range(num_stages):
        k = min(t, 2)
        thr = DEFAULT_IOU_THRESHOLDS[k] + 0.05 * max(t - 2, 0)
        alpha = DEFAULT_ALPHA[k] * 0.5 ** max(t - 2, 0)
        out.append(StageConfig(index=t, iou_threshold=thr, loss_weight=alpha, delta_std=DEFAULT_DELTA_STDS[k]))
    return out


class ProposalConfig(_Strict):
    n_jitter: int = Field(default=8, ge=0)
    n_random: int = Field(default=32, ge=0)
    center_sigma: float = Field(default=0.15, ge=0.0)
    scale_sigma: float = Field(default=0.2, ge=0.0)
    add_gt: bool = True


class PipelineConfig(_Strict):
    num_stages: int = Field(default=3, ge=1)
    interleaved: bool = True
    mask_info_flow: bool = True
    semantic_branch: bool = True
    semantic_fusion: FusionMode = "both"
    stages: Optional[list[StageConfig]] = None
    semantic_loss_weight: float = Field(default=1.0, ge=0.0)
    num_classes: int = Field(default=3, ge=1)
    num_stuff_classes: int = Field(default=4, ge=2)
    channels: int = Field(default=32, ge=1)
    backbone_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    fc_width: int = Field(default=256, ge=1)
    mask_resolution: int = 28
    score_threshold: float = Field(default=0.001, ge=0.0)
    nms_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    max_detections: int = Field(default=100, ge=1)
    smooth_l1_beta: float = Field(default=1.0, gt=0.0)
    proposals: ProposalConfig = ProposalConfig()

    @model_validator(mode="before")
    @classmethod
    def _fill_stages(cls, data):
        if isinstance(data, dict) and data.get("stages") is None:
            data = dict(data)
            data["stages"] = default_stages(int(data.get("num_stages", 3)))
        return data

    @model_validator(mode="after")
    def _check(self):
        if len(self.stages) != self.num_stages:
            raise ValueError(f"{len(self.stages)} stage configs for num_stages={self.num_stages}")
        thr = [s.iou_threshold for s in self.stages]
        if any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError(f"stage IoU thresholds must be strictly increasing, got {thr}")
        if [s.index for s in self.stages] != list(range(self.num_stages)):
            raise ValueError("stage indices must be 0..T-1 in order")
        if self.semantic_fusion != "none" and not self.semantic_branch:
            raise ValueError(f"semantic_fusion={self.semantic_fusion!r} requires semantic_branch=true")
        if self.mask_resolution != 28:
            raise ValueError("mask_resolution is fixed at 28 (14x14 mask features, 2x deconvolution)")
        return self

    @property
    def alpha(self) -> list[float]:
        return [s.loss_weight for s in self.stages]

    @property
    def fuse_bbox(self) -> bool:
        return self.semantic_fusion in ("bbox", "both")

    @property
    def fuse_mask(self) -> bool:
        return self.semantic_fusion in ("mask", "both")

    def variant_name(self) -> str:
        if self.num_stages == 1 and not (self.interleaved or self.mask_info_flow or self.semantic_branch):
            return "mask_rcnn"
        if not (self.interleaved or self.mask_info_flow or self.semantic_branch):
            return "cascade_mask_rcnn"
        parts = ["cascade"]
        if self.interleaved:
            parts.append("interleaved")
        if self.mask_info_flow:
            parts.append("mask_info")
        if self.semantic_branch:
            parts.append(f"semantic_{self.semantic_fusion}")
        return "+".join(parts)

    # -- presets ------------------------------------------------------------
    @classmethod
    def htc(cls, **kw) -> "PipelineConfig":
        return cls(**kw)

    @classmethod
    def cascade_mask_rcnn(cls, num_stages: int = 3, **kw) -> "PipelineConfig":
        return cls(num_stages=num_stages, interleaved=False, mask_info_flow=False, semantic_branch=False, semantic_fusion="none", **kw)

    @classmethod
    def mask_rcnn(cls, **kw) -> "PipelineConfig":
        return cls.cascade_mask_rcnn(num_stages=1, **kw)


class TrainConfig(_Strict):
    epochs: int = Field(default=12, ge=1)
    batch_size: int = Field(default=2, ge=1)
    lr: float = Field(default=0.005, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_steps: tuple[int, ...] = (9, 11)
    lr_gamma: float = Field(default=0.1, gt=0.0)
    flip: bool = False

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** sum(epoch >= s for s in self.lr_steps)


class RunConfig(_Strict):
    pipeline: PipelineConfig = PipelineConfig()
    train: TrainConfig = TrainConfig()
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    seed: int = 0

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text())

    def dump(self, path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))


def _canonical(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: BaseModel) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:16]
