"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 5-7 train six full-size models (about 80 minutes on one core).
Trained checkpoints are kept in the pytest cache, keyed by run-config hash,
so a rerun only evaluates; ``pytest --cache-clear`` retrains from scratch.
"""

import json

import numpy as np
import pytest

from conftest import record_criterion, tiny_model
from htc import diffcore as dc
from htc import roi
from htc.cli import main
from htc.config import PipelineConfig, RunConfig, TrainConfig, config_hash
from htc.dataset import generate_dataset
from htc.diffcore.gradcheck import check_gradients
from htc.diffcore.tensor import Tensor
from htc.evalkit import RleMask, average_precision, rle_decode, rle_encode
from htc.evaluate import evaluate_model
from htc.train import compute_loss, load_model, resolve_checkpoint, stage_losses, train
from test_cascade import _all_zero, _fd_check, _grads, _touched
from test_diffcore import OPS, leaf
from test_evalkit import brute_force_ap
from test_roi import brute_force_roi_align, random_rois

SEEDS = range(5)
GRAD_TOL = 1e-4


def report(number, passed, detail):
    record_criterion(number, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
    assert passed, detail


# -- 1. gradient suite ------------------------------------------------------------


def _probe_loss(fn, rng):
    probe = Tensor(rng.standard_normal(fn().shape))
    return lambda: dc.sum_all(dc.mul(fn(), probe))


def _layer_cases(rng):
    x, w, b = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    xs, ws, bs = leaf(rng, 2, 2, 6, 6), leaf(rng, 2, 2, 3, 3), leaf(rng, 2)
    xd, wd, bd = leaf(rng, 1, 2, 4, 4), leaf(rng, 2, 3, 4, 4), leaf(rng, 3)
    logits, labels = leaf(rng, 6, 4), rng.integers(0, 4, size=6)
    mlogits, mtarget = leaf(rng, 3, 4, 4, scale=3), rng.integers(0, 2, size=(3, 4, 4))
    pred, target = leaf(rng, 5, 4, scale=2), rng.standard_normal((5, 4))
    return {
        "conv2d": (_probe_loss(lambda: dc.conv2d(x, w, b, padding=1), rng), [x, w, b]),
        "conv2d_stride2": (_probe_loss(lambda: dc.conv2d(xs, ws, bs, stride=2, padding=1), rng), [xs, ws, bs]),
        "deconv2d": (_probe_loss(lambda: dc.deconv2d(xd, wd, bd, stride=2), rng), [xd, wd, bd]),
        "cross_entropy": (lambda: dc.cross_entropy_loss(logits, labels), [logits]),
        "binary_cross_entropy": (lambda: dc.binary_cross_entropy_loss(mlogits, mtarget), [mlogits]),
        "smooth_l1": (lambda: dc.smooth_l1_loss(pred, target, beta=1.0), [pred]),
    }


def _composed_loss_errors(seed, samples):
    single = tiny_model(seed=seed, num_stages=1, interleaved=False, mask_info_flow=False, semantic_fusion="both")
    cascade = tiny_model(seed=seed)

    def loss_of(model):
        return lambda: compute_loss(model.forward_train(samples, seed=seed), model.cfg.alpha, 1.0)[0]

    rng = np.random.default_rng(seed)
    names = [n for n, _ in single.named_parameters() if n.endswith("weight")]
    e1 = _fd_check(single, loss_of(single), names, rng, n_entries=2)
    names = [n for n, _ in cascade.named_parameters() if n.startswith(("mask_heads", "semantic.logits")) and n.endswith("weight")]
    e3 = _fd_check(cascade, loss_of(cascade), names, rng)
    return e1, e3


def test_criterion_1_gradient_suite(small_batch):
    worst = {}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, build in OPS.items():
            fn, inputs = build(rng)
            worst[name] = max(worst.get(name, 0.0), check_gradients(_probe_loss(fn, rng), inputs))
        for name, (fn, inputs) in _layer_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs))
        e1, e3 = _composed_loss_errors(seed, small_batch)
        worst["loss_single_stage"] = max(worst.get("loss_single_stage", 0.0), e1)
        worst["loss_three_stage"] = max(worst.get("loss_three_stage", 0.0), e3)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    report(1, err < GRAD_TOL, f"{len(worst)} ops/losses x {len(SEEDS)} seeds, worst rel err {err:.2e} ({name}) < {GRAD_TOL:g}")


# -- 2. RoIAlign oracle ---------------------------------------------------------------


def test_criterion_2_roi_align_oracle():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((2, 3, 12, 10))
    rois = random_rois(rng, 100, 2, 40.0)
    diff = 0.0
    for out, scale in ((7, 0.25), (14, 0.125)):
        got = roi.roi_align(Tensor(feats), rois, out, scale, 2).data
        diff = max(diff, float(np.abs(got - brute_force_roi_align(feats, rois, out, scale, 2)).max()))
    grad = 0.0
    for seed in SEEDS:
        g = np.random.default_rng(seed)
        f = Tensor(g.standard_normal((2, 2, 6, 5)), requires_grad=True)
        r = random_rois(g, 6, 2, 24.0)
        grad = max(grad, check_gradients(_probe_loss(lambda: roi.roi_align(f, r, 7, 0.25), g), [f]))
    report(2, diff < 1e-6 and grad < GRAD_TOL, f"100 RoIs max abs diff {diff:.1e} < 1e-6, gradient rel err {grad:.1e} < {GRAD_TOL:g}")


# -- 3. topology ---------------------------------------------------------------------


def _info_flow_holds(samples):
    ok = True
    for flow in (True, False):
        model = tiny_model(mask_info_flow=flow, semantic_branch=False, semantic_fusion="none")
        out = model.forward_train(samples, seed=3)
        grads = _grads(model, stage_losses(out.stages[2])[2])
        ok &= _touched(grads, "mask_heads.0.convs") if flow else _all_zero(grads, "mask_heads.0.")
    return ok


def _interleaving_holds(samples):
    ok = True
    for interleaved in (True, False):
        model = tiny_model(interleaved=interleaved, mask_info_flow=False, semantic_branch=False, semantic_fusion="none")
        for st in model.forward_train(samples, seed=5).stages:
            expected = st.refined[st.pos_index] if interleaved else st.rois[st.pos_index, 1:]
            ok &= len(st.pos_index) > 0 and np.array_equal(st.mask_rois[:, 1:], expected)
    return ok


def _fusion_holds(samples):
    ok = True
    for fusion in ("none", "bbox", "mask", "both"):
        model = tiny_model(semantic_fusion=fusion)
        out = model.forward_train(samples, seed=7)
        box = dc.add_n([dc.add(*stage_losses(st)[:2]) for st in out.stages])
        mask = dc.add_n([stage_losses(st)[2] for st in out.stages])
        seg = dc.cross_entropy_loss(out.semantic_logits, out.stuff_target)
        g_box, g_mask, g_seg = _grads(model, box), _grads(model, mask), _grads(model, seg)
        ok &= _touched(g_box, "semantic.convs") == (fusion in ("bbox", "both"))
        ok &= _touched(g_mask, "semantic.convs") == (fusion in ("mask", "both"))
        ok &= _touched(g_seg, "semantic.convs")
    return ok


def _mask_rcnn_holds(samples):
    model = tiny_model(num_stages=1, interleaved=False, mask_info_flow=False, semantic_branch=False, semantic_fusion="none")
    (st,) = model.forward_train(samples, seed=2).stages
    structure = len(model.box_heads) == 1 and model.semantic is None and model.mask_heads[0].embed is None
    parallel = np.array_equal(st.mask_rois[:, 1:], st.rois[st.pos_index, 1:])
    return bool(structure and parallel and _all_zero(_grads(model, stage_losses(st)[2]), "box_heads."))


def test_criterion_3_topology(small_batch):
    checks = {
        "(a) mask info flow": _info_flow_holds(small_batch),
        "(b) interleaving": _interleaving_holds(small_batch),
        "(c) semantic fusion": _fusion_holds(small_batch),
        "(d) mask r-cnn structure": _mask_rcnn_holds(small_batch),
    }
    report(3, all(checks.values()), ", ".join(f"{k}={'ok' if v else 'BROKEN'}" for k, v in checks.items()))


# -- 4. evaluator oracle ---------------------------------------------------------------


def test_criterion_4_evaluator_oracle():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_gt, n_det = int(rng.integers(1, 6)), int(rng.integers(0, 11))
        scores = np.round(rng.random(n_det), 1)
        is_tp = np.zeros(n_det, dtype=bool)
        if n_det:
            is_tp[rng.choice(n_det, size=min(n_gt, n_det, int(rng.integers(0, n_gt + 1))), replace=False)] = True
        worst = max(worst, abs(average_precision(scores, is_tp, n_gt) - brute_force_ap(list(scores), list(is_tp), n_gt)))
    rng = np.random.default_rng(0)
    bitwise = True
    for _ in range(100):
        h, w = rng.integers(1, 40, 2)
        m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        back = rle_decode(RleMask.from_json(json.loads(json.dumps(rle_encode(m).to_json()))))
        bitwise &= back.dtype == m.dtype and back.tobytes() == m.tobytes()
    report(4, worst < 1e-9 and bitwise, f"20 instances max |AP - oracle| {worst:.1e} < 1e-9, 100 RLE round trips bitwise={bitwise}")


# -- 5-7. trained models -----------------------------------------------------------------

EPOCHS = 12
TREND_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def easy_splits():
    # the same splits `htc gen` writes with its defaults
    return generate_dataset(200, 0), generate_dataset(50, 1)


@pytest.fixture(scope="session")
def trained(request, easy_splits):
    """Lazily trained and evaluated models keyed by (variant, seed)."""
    cache = request.config.cache.mkdir("htc-acceptance")
    train_set, val_set = easy_splits
    reports = {}

    def get(variant, seed):
        if (variant, seed) not in reports:
            pipe = PipelineConfig.htc() if variant == "htc" else PipelineConfig.cascade_mask_rcnn()
            run = RunConfig(pipeline=pipe, train=TrainConfig(epochs=EPOCHS), seed=seed)
            work = cache / f"{variant}_seed{seed}_{config_hash(run)}"
            final = work / f"epoch_{EPOCHS:03d}"
            if not (final / "manifest.json").exists():
                train(run, train_set, work, resume=True)
            model, _ = load_model(resolve_checkpoint(final), pipe)
            reports[variant, seed] = evaluate_model(model, val_set)
        return reports[variant, seed]

    return get


@pytest.mark.slow
def test_criterion_5_end_to_end_learning(trained):
    r = trained("htc", 0)
    passed = r.mask.ap >= 0.50 and r.box.ap >= 0.55
    report(5, passed, f"HTC seed 0, {EPOCHS} epochs: mask AP {r.mask.ap:.3f} (>= 0.50), box AP {r.box.ap:.3f} (>= 0.55)")


@pytest.mark.slow
def test_criterion_6_trend_over_seeds(trained):
    htc = [trained("htc", s).mask.ap for s in TREND_SEEDS]
    base = [trained("cascade", s).mask.ap for s in TREND_SEEDS]
    wins = sum(a > b for a, b in zip(htc, base))
    passed = np.median(htc) >= np.median(base) and wins >= 2
    detail = f"mask AP HTC {[round(v, 3) for v in htc]} vs cascade {[round(v, 3) for v in base]}, medians {np.median(htc):.3f} >= {np.median(base):.3f}, wins {wins}/3 (>= 2)"
    report(6, passed, detail)


@pytest.mark.slow
def test_criterion_7_stage_ensembling(trained):
    r = trained("htc", 0)
    singles = [s.ap for s in r.stage_mask]
    passed = r.mask.ap >= max(singles) - 0.01
    report(7, passed, f"stage 1~3 mask AP {r.mask.ap:.3f} >= max single stage {max(singles):.3f} - 0.01 (stages {[round(v, 3) for v in singles]})")


# -- 8. determinism --------------------------------------------------------------------------


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "data"), "--n-train", "8", "--n-val", "4", "--seed", "3"]) == 0
    cfg = tmp_path / "run.json"
    RunConfig(train=TrainConfig(epochs=1), seed=4).dump(cfg)
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "data" / "train"), "--out", str(tmp_path / name)]) == 0
    same_ckpt = _tree(tmp_path / "a" / "epoch_001") == _tree(tmp_path / "b" / "epoch_001")
    capsys.readouterr()
    reports = []
    for _ in range(2):
        assert main(["eval", "--checkpoint", str(tmp_path / "a"), "--data", str(tmp_path / "data" / "val")]) == 0
        reports.append(capsys.readouterr().out)
    report(8, same_ckpt and reports[0] == reports[1], f"checkpoints bitwise identical={same_ckpt}, eval reports identical={reports[0] == reports[1]}")
