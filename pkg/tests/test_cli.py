import json

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_pipeline
from htc.cli import main
from htc.config import RunConfig, TrainConfig, config_hash
from htc.dataset import load_coco_annotations

METRIC_KEYS = {"AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"}


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data"), "--n-train", "4", "--n-val", "3", "--size", "64", "--seed", "5"]) == 0
    cfg = root / "run.json"
    RunConfig(pipeline=tiny_pipeline(), train=TrainConfig(epochs=1, batch_size=2), seed=1).dump(cfg)
    assert main(["train", "--config", str(cfg), "--data", str(root / "data" / "train"), "--out", str(root / "run")]) == 0
    return root


def test_gen_defaults_and_repeatability(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--out", str(tmp_path / "b")]) == 0
    train = load_coco_annotations(tmp_path / "a" / "train" / "annotations.json")
    val = load_coco_annotations(tmp_path / "a" / "val" / "annotations.json")
    assert len(train["images"]) == 200 and len(val["images"]) == 50
    assert train["info"]["seed"] == 0 and train["info"]["split"] == "train"
    for split in ("train", "val"):
        a = (tmp_path / "a" / split / "annotations.json").read_bytes()
        assert a == (tmp_path / "b" / split / "annotations.json").read_bytes()


def test_gen_rejects_size_not_multiple_of_32(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", str(tmp_path), "--size", "100"])
    assert exc.value.code == 2
    assert "multiple of 32" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_train_without_data_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "no training data" in capsys.readouterr().err


def test_train_writes_hashed_checkpoint_and_metrics(workspace):
    run = RunConfig.load(workspace / "run.json")
    manifest = json.loads((workspace / "run" / "epoch_001" / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(run.pipeline)
    assert manifest["extra"]["seed"] == 1
    for line in (workspace / "run" / "metrics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["config_hash"] == config_hash(run.pipeline) and rec["seed"] == 1


def test_eval_reports_all_metrics(workspace, capsys, tmp_path):
    out = tmp_path / "report.json"
    argv = ["eval", "--checkpoint", str(workspace / "run"), "--data", str(workspace / "data" / "val"), "--out", str(out)]
    assert main(argv) == 0
    report = _json_out(capsys)
    assert report == json.loads(out.read_text())
    assert set(report["bbox"]) == METRIC_KEYS and set(report["segm"]) == METRIC_KEYS
    assert report["bbox"]["AP"] >= 0 and report["segm"]["AP"] >= 0
    assert set(report["segm_per_stage"]) == {"stage 1", "stage 2", "stage 3", "stage 1~3"}
    assert report["config_hash"] == config_hash(tiny_pipeline()) and report["seed"] == 1
    assert main(argv) == 0
    assert _json_out(capsys) == report


def test_eval_refuses_mismatched_pipeline(workspace, tmp_path, capsys):
    cfg = tmp_path / "other.json"
    RunConfig(pipeline=tiny_pipeline(num_stages=2)).dump(cfg)
    argv = ["eval", "--checkpoint", str(workspace / "run"), "--data", str(workspace / "data" / "val"), "--config", str(cfg)]
    assert main(argv) == 1
    assert "hash" in capsys.readouterr().err


def test_eval_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path)]) == 1
    assert "no checkpoint" in capsys.readouterr().err


def test_infer_writes_overlay_and_results(workspace, tmp_path, capsys):
    src = workspace / "data" / "val"
    image = sorted(src.glob("images/*.png"))[0]
    assert main(["infer", "--checkpoint", str(workspace / "run"), "--image", str(image), "--out", str(tmp_path), "--min-score", "0"]) == 0
    summary = _json_out(capsys)
    overlay = Image.open(tmp_path / "overlay.png")
    assert overlay.size == Image.open(image).size and overlay.mode == "RGB"
    doc = json.loads((tmp_path / "results.json").read_text())
    assert doc["config_hash"] == config_hash(tiny_pipeline()) and doc["seed"] == 1
    assert len(doc["detections"]) == summary["detections"]
    for det in doc["detections"]:
        assert {"bbox", "score", "category_id", "segmentation"} <= set(det)


def test_infer_pads_odd_sized_images(workspace, tmp_path, capsys):
    path = tmp_path / "odd.png"
    Image.fromarray(np.full((50, 70, 3), 128, dtype=np.uint8)).save(path)
    assert main(["infer", "--checkpoint", str(workspace / "run"), "--image", str(path), "--out", str(tmp_path / "o")]) == 0
    assert Image.open(tmp_path / "o" / "overlay.png").size == (70, 50)


def test_ablate_table_schema(workspace, tmp_path, capsys):
    argv = ["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path), "--config", str(workspace / "run.json")]
    argv += ["--n-train", "2", "--n-val", "2", "--epochs", "1"]
    assert main(argv) == 0
    table = capsys.readouterr().out
    assert table == (tmp_path / "ablation.txt").read_text()
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["variant"] for r in report["rows"]] == ["cascade", "+interleaved", "+mask_info", "+semantic"]
    lines = table.splitlines()
    header = next(i for i, line in enumerate(lines) if line.startswith("variant"))
    rows = lines[header + 1 : header + 5]
    assert [r.split()[0] for r in rows] == ["cascade", "+interleaved", "+mask_info", "+semantic"]
    # every cell is padded to its column width, so aligned lines have equal length
    assert len({len(line) for line in [lines[header]] + rows}) == 1
    assert "stage 1~3" in table
    for r in report["rows"]:
        assert set(r["topology"]) == {"cross_stage_mask_grad", "mask_pools_refined_boxes", "semantic_reaches_heads", "mask_rcnn_structure"}
        for run in r["per_seed"]:
            assert run["config_hash"] == r["config_hash"] and run["seed"] == 0


def test_repeated_train_gives_identical_checkpoints(workspace, tmp_path):
    argv = ["train", "--config", str(workspace / "run.json"), "--data", str(workspace / "data" / "train")]
    assert main(argv + ["--out", str(tmp_path / "again")]) == 0
    first = tree_bytes(workspace / "run" / "epoch_001")
    assert first == tree_bytes(tmp_path / "again" / "epoch_001")
