"""Multi-task loss and the SGD training loop."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cascade import HybridTaskCascade, TrainOutputs
from .config import PipelineConfig, RunConfig, config_hash
from .dataset import flip_sample
from .diffcore import SGD, load_checkpoint, ops, save_checkpoint
from .diffcore.tensor import Tensor

CHECKPOINT_PREFIX = "epoch_"


@dataclass
class LossReport:
    L_cls: list
    L_reg: list
    L_mask: list
    L_seg: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def weighted_total(report: LossReport, alpha: Sequence[float], beta: float) -> float:
    """sum_t alpha_t (L_cls + L_reg + L_mask) + beta L_seg, from the logged terms."""
    stage = sum(a * (c + r + m) for a, c, r, m in zip(alpha, report.L_cls, report.L_reg, report.L_mask))
    return stage + beta * report.L_seg


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def stage_losses(stage, beta_smooth: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Classification CE over all sampled RoIs, smooth-L1 on positives, BCE on the assigned class's mask."""
    logits = stage.box.class_logits
    l_cls = ops.cross_entropy_loss(logits, stage.labels)
    if len(stage.pos_index):
        deltas = ops.index_rows(stage.box.deltas, stage.pos_index)
        # summed over the 4 coordinates, averaged over positives
        l_reg = ops.mul(ops.smooth_l1_loss(deltas, stage.box_targets, beta_smooth), 4.0)
    else:
        l_reg = _zero(logits.dtype)
    if stage.mask_logits is not None and len(stage.mask_labels):
        chosen = ops.take_channel(stage.mask_logits, stage.mask_labels - 1)
        l_mask = ops.binary_cross_entropy_loss(chosen, stage.mask_targets.astype(chosen.dtype))
    else:
        l_mask = _zero(logits.dtype)
    return l_cls, l_reg, l_mask


def compute_loss(
    out: TrainOutputs,
    alpha: Sequence[float],
    beta: float = 1.0,
    smooth_l1_beta: float = 1.0,
) -> tuple[Tensor, LossReport]:
    alpha = list(alpha)
    if len(alpha) != len(out.stages):
        raise ValueError(f"{len(alpha)} stage weights for {len(out.stages)} stages")
    terms = []
    cls_v, reg_v, mask_v = [], [], []
    for a, stage in zip(alpha, out.stages):
        l_cls, l_reg, l_mask = stage_losses(stage, smooth_l1_beta)
        cls_v.append(l_cls.item())
        reg_v.append(l_reg.item())
        mask_v.append(l_mask.item())
        terms.append(ops.mul(ops.add_n([l_cls, l_reg, l_mask]), a))
    seg_v = 0.0
    if out.semantic_logits is not None:
        l_seg = ops.cross_entropy_loss(out.semantic_logits, out.stuff_target)
        seg_v = l_seg.item()
        if beta:
            terms.append(ops.mul(l_seg, beta))
    total = ops.add_n(terms)
    return total, LossReport(cls_v, reg_v, mask_v, seg_v, total.item())


def first_non_finite(report: LossReport) -> Optional[str]:
    for key in ("L_cls", "L_reg", "L_mask"):
        for t, v in enumerate(getattr(report, key)):
            if not math.isfinite(v):
                return f"{key}[{t}]"
    if not math.isfinite(report.L_seg):
        return "L_seg"
    if not math.isfinite(report.total):
        return "total"
    return None


def iteration_seed(seed: int, epoch: int, it: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, it]).generate_state(1)[0])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 2**20]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def build_model(run: RunConfig) -> HybridTaskCascade:
    return HybridTaskCascade(run.pipeline, seed=run.seed)


def checkpoint_dirs(out_dir) -> list[Path]:
    return sorted(p for p in Path(out_dir).glob(f"{CHECKPOINT_PREFIX}*") if (p / "manifest.json").exists())


def save_model(model: HybridTaskCascade, run: RunConfig, path, epoch: int, optimizer_state: Optional[dict] = None) -> Path:
    """Checkpoint with the pipeline hash, seed and full run config embedded."""
    extra = {"epoch": epoch, "seed": run.seed, "run_hash": config_hash(run), "run_config": run.model_dump(mode="json")}
    return save_checkpoint(path, model.state_dict(), config_hash(run.pipeline), optimizer_state, extra=extra)


def resolve_checkpoint(path) -> Path:
    """A checkpoint directory, or the newest checkpoint inside a training output directory."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    found = checkpoint_dirs(path) if path.is_dir() else []
    if not found:
        raise FileNotFoundError(f"no checkpoint found at {path}")
    return found[-1]


def load_model(path, pipeline: Optional[PipelineConfig] = None) -> tuple[HybridTaskCascade, dict]:
    """Rebuild a model from a checkpoint; refuses a pipeline whose hash differs from the stored one."""
    path = resolve_checkpoint(path)
    ckpt = load_checkpoint(path)
    stored = RunConfig.model_validate(ckpt["extra"]["run_config"])
    if pipeline is not None and config_hash(pipeline) != ckpt["config_hash"]:
        raise ValueError(
            f"checkpoint {path} was trained with pipeline hash {ckpt['config_hash']}, requested pipeline hashes to {config_hash(pipeline)}"
        )
    model = HybridTaskCascade(stored.pipeline, seed=stored.seed)
    model.load_state_dict(ckpt["params"])
    return model, ckpt


def train(
    run: RunConfig,
    samples: Sequence,
    out_dir,
    epochs: Optional[int] = None,
    resume: bool = False,
    max_iters: Optional[int] = None,
    progress: Optional[Callable[[str], None]] = None,
    on_step: Optional[Callable[[int, HybridTaskCascade], None]] = None,
) -> HybridTaskCascade:
    """Train ``run.pipeline`` on ``samples``; logs to ``out_dir/metrics.jsonl`` and checkpoints every epoch.

    With ``resume`` the newest checkpoint in ``out_dir`` (params and momentum
    buffers) is restored and training continues at the next epoch.
    ``max_iters`` stops early inside an epoch (no checkpoint for the partial epoch).
    ``on_step(step, model)`` is called after every parameter update.
    """
    if len(samples) == 0:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg, tcfg = run.pipeline, run.train
    epochs = tcfg.epochs if epochs is None else epochs
    model = build_model(run)
    params = model.parameters()
    opt = SGD(params, tcfg.lr, tcfg.momentum, tcfg.weight_decay)
    p_hash = config_hash(cfg)
    r_hash = config_hash(run)
    start_epoch = 0
    log_path = out_dir / "metrics.jsonl"
    if resume and checkpoint_dirs(out_dir):
        last = checkpoint_dirs(out_dir)[-1]
        ckpt = load_checkpoint(last)
        if ckpt["extra"].get("run_hash") != r_hash:
            raise ValueError(f"cannot resume from {last}: run config hash differs")
        model.load_state_dict(ckpt["params"])
        opt.state = {k: v.copy() for k, v in ckpt["optim"].items()}
        start_epoch = int(ckpt["extra"]["epoch"])
        _truncate_log(log_path, start_epoch)
    elif log_path.exists():
        log_path.unlink()

    say = progress or (lambda msg: print(msg, file=sys.stderr))
    alpha = cfg.alpha
    beta = cfg.semantic_loss_weight if cfg.semantic_branch else 0.0
    done = 0
    with log_path.open("a") as log:
        for epoch in range(start_epoch, epochs):
            lr = tcfg.lr_at(epoch)
            batches = epoch_batches(len(samples), tcfg.batch_size, run.seed, epoch)
            for it, idx in enumerate(batches):
                seed = iteration_seed(run.seed, epoch, it)
                batch = [samples[i] for i in idx]
                if tcfg.flip:
                    coin = np.random.default_rng([seed, 1]).random(len(batch)) < 0.5
                    batch = [flip_sample(s) if c else s for s, c in zip(batch, coin)]
                model.zero_grad()
                out = model.forward_train(batch, seed=seed)
                total, report = compute_loss(out, alpha, beta, cfg.smooth_l1_beta)
                bad = first_non_finite(report)
                if bad is not None:
                    raise FloatingPointError(f"non-finite loss term {bad} at epoch {epoch} iteration {it}: {report.as_dict()}")
                total.backward()
                opt.step(lr)
                step = epoch * len(batches) + it
                record = {"iter": step, "epoch": epoch, "lr": lr, **report.as_dict(), "seed": run.seed, "config_hash": p_hash}
                log.write(json.dumps(record) + "\n")
                done += 1
                if on_step is not None:
                    on_step(step, model)
                if it % 10 == 0:
                    say(f"epoch {epoch} iter {it}/{len(batches)} loss {report.total:.4f}")
                if max_iters is not None and done >= max_iters:
                    log.flush()
                    return model
            log.flush()
            save_model(model, run, out_dir / f"{CHECKPOINT_PREFIX}{epoch + 1:03d}", epoch + 1, opt.state)
    return model


def _truncate_log(path: Path, epoch: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["epoch"] < epoch]
    path.write_text("".join(line + "\n" for line in keep))
