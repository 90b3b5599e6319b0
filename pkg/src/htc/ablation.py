"""Variant sweeps: train several pipelines under one budget and tabulate AP.

Besides AP, each variant gets four booleans observed on an actual forward and
backward pass, so a table row shows the data flow the flags really produced.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cascade import HybridTaskCascade
from .config import PipelineConfig, RunConfig, TrainConfig, config_hash
from .evaluate import evaluate_detections, run_detection
from .train import stage_losses, train
from .diffcore import ops

COMPONENT_ROWS = (
    ("cascade", dict(interleaved=False, mask_info_flow=False, semantic_branch=False, semantic_fusion="none")),
    ("+interleaved", dict(interleaved=True, mask_info_flow=False, semantic_branch=False, semantic_fusion="none")),
    ("+mask_info", dict(interleaved=True, mask_info_flow=True, semantic_branch=False, semantic_fusion="none")),
    ("+semantic", dict(interleaved=True, mask_info_flow=True, semantic_branch=True, semantic_fusion="both")),
)
FUSION_ROWS = tuple((f"fusion={f}", dict(semantic_fusion=f)) for f in ("none", "bbox", "mask", "both"))
BETA_ROWS = tuple((f"beta={b}", dict(semantic_loss_weight=b)) for b in (0.5, 1.0, 2.0, 3.0))
AXES = {"components": COMPONENT_ROWS, "fusion": FUSION_ROWS, "beta": BETA_ROWS}
TOPOLOGY_KEYS = ("cross_stage_mask_grad", "mask_pools_refined_boxes", "semantic_reaches_heads", "mask_rcnn_structure")


def _nonzero(model, prefix) -> bool:
    return any(p.grad is not None and np.any(p.grad) for n, p in model.named_parameters() if n.startswith(prefix))


def topology_report(model: HybridTaskCascade, samples: Sequence, seed: int = 0) -> dict:
    """Observe the data flow of ``model`` on one batch.

    * cross_stage_mask_grad: the last stage's mask loss reaches the first mask trunk;
    * mask_pools_refined_boxes: every stage's mask branch pooled on the boxes its box head regressed;
    * semantic_reaches_heads: box or mask losses reach the semantic trunk;
    * mask_rcnn_structure: one stage, no semantic branch, box and mask branches pooled on the same boxes.
    """
    out = model.forward_train(list(samples), seed=seed)
    t_last = len(out.stages) - 1

    model.zero_grad()
    cross = False
    if t_last > 0 and out.stages[-1].mask_logits is not None:
        stage_losses(out.stages[-1])[2].backward()
        cross = _nonzero(model, "mask_heads.0.convs")

    refined = all(
        len(st.pos_index) > 0 and np.array_equal(st.mask_rois[:, 1:], st.refined[st.pos_index]) for st in out.stages
    )

    semantic = False
    if model.semantic is not None:
        model.zero_grad()
        out = model.forward_train(list(samples), seed=seed)
        heads = ops.add_n([ops.add_n(list(stage_losses(st))) for st in out.stages])
        heads.backward()
        semantic = _nonzero(model, "semantic.convs")

    parallel = all(np.array_equal(st.mask_rois[:, 1:], st.rois[st.pos_index, 1:]) for st in out.stages)
    structure = len(model.box_heads) == 1 and model.semantic is None and parallel and model.mask_heads[0].embed is None
    model.clear_grad()
    return dict(zip(TOPOLOGY_KEYS, (cross, refined, semantic, structure)))


def variant_pipelines(axis: str = "components", base: Optional[PipelineConfig] = None) -> list[tuple[str, PipelineConfig]]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    base = base or PipelineConfig.htc()
    fields = base.model_dump()
    fields.pop("stages")
    return [(name, PipelineConfig(**{**fields, **kw})) for name, kw in AXES[axis]]


def evaluate_variant(model: HybridTaskCascade, val: Sequence) -> dict:
    dets = run_detection(model, val)
    box = evaluate_detections(val, dets, iou_type="bbox")
    mask = evaluate_detections(val, dets, iou_type="segm")
    stages = {f"stage {t + 1}": evaluate_detections(val, dets, stage=t).ap for t in range(model.cfg.num_stages)}
    stages[f"stage 1~{model.cfg.num_stages}"] = mask.ap
    return {"box": box.as_dict(), "mask": mask.as_dict(), "stage_mask_ap": stages}


def run_ablation(
    train_samples: Sequence,
    val_samples: Sequence,
    seeds: Sequence[int],
    out_dir,
    axis: str = "components",
    train_cfg: Optional[TrainConfig] = None,
    base: Optional[PipelineConfig] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """Train every variant of ``axis`` for every seed and collect per-seed and median AP."""
    out_dir = Path(out_dir)
    train_cfg = train_cfg or TrainConfig()
    rows = []
    for name, pipe in variant_pipelines(axis, base):
        per_seed = []
        topo = None
        for seed in seeds:
            run = RunConfig(pipeline=pipe, train=train_cfg, seed=seed)
            work = out_dir / f"{name.strip('+').replace('=', '_')}_seed{seed}"
            model = train(run, train_samples, work, progress=progress)
            if topo is None:
                topo = topology_report(model, train_samples[:2], seed=seed)
            result = evaluate_variant(model, val_samples)
            result.update(seed=seed, config_hash=config_hash(pipe))
            (work / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
            per_seed.append(result)
        rows.append(
            {
                "variant": name,
                "interleaved": pipe.interleaved,
                "mask_info_flow": pipe.mask_info_flow,
                "semantic_fusion": pipe.semantic_fusion if pipe.semantic_branch else "-",
                "semantic_loss_weight": pipe.semantic_loss_weight,
                "config_hash": config_hash(pipe),
                "box_ap": float(np.median([r["box"]["AP"] for r in per_seed])),
                "mask_ap": float(np.median([r["mask"]["AP"] for r in per_seed])),
                "stage_mask_ap": {k: float(np.median([r["stage_mask_ap"][k] for r in per_seed])) for k in per_seed[0]["stage_mask_ap"]},
                "topology": topo,
                "per_seed": per_seed,
            }
        )
    return {"axis": axis, "seeds": list(seeds), "train": train_cfg.model_dump(mode="json"), "rows": rows}


def format_table(report: dict) -> str:
    """Aligned plain-text table: one line per variant, then the per-stage mask AP block."""
    head = ["variant", "interleaved", "mask_info", "semantic", "beta", "box AP", "mask AP"] + list(TOPOLOGY_KEYS)
    lines = []
    for r in report["rows"]:
        lines.append(
            [r["variant"], str(r["interleaved"]), str(r["mask_info_flow"]), r["semantic_fusion"], f"{r['semantic_loss_weight']:g}", f"{r['box_ap']:.3f}", f"{r['mask_ap']:.3f}"]
            + [str(r["topology"][k]) for k in TOPOLOGY_KEYS]
        )
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [f"seeds: {report['seeds']}", fmt.format(*head)]
    out += [fmt.format(*row) for row in lines]
    out.append("")
    out.append("per-stage mask AP (median over seeds)")
    for r in report["rows"]:
        cells = "  ".join(f"{k}: {v:.3f}" for k, v in r["stage_mask_ap"].items())
        out.append(f"{r['variant']:<14}{cells}")
    return "\n".join(out) + "\n"
