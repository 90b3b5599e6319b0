import pytest

from conftest import TINY, tiny_model, tiny_pipeline
from htc.ablation import COMPONENT_ROWS, TOPOLOGY_KEYS, format_table, topology_report, variant_pipelines
from htc.config import PipelineConfig


@pytest.mark.parametrize(
    "name, expected",
    [
        ("cascade", (False, False, False, False)),
        ("+interleaved", (False, True, False, False)),
        ("+mask_info", (True, True, False, False)),
        ("+semantic", (True, True, True, False)),
    ],
)
def test_topology_booleans_follow_flags(small_batch, name, expected):
    flags = dict(COMPONENT_ROWS)[name]
    report = topology_report(tiny_model(**flags), small_batch, seed=2)
    assert tuple(report[k] for k in TOPOLOGY_KEYS) == expected


def test_single_stage_plain_pipeline_has_mask_rcnn_structure(small_batch):
    model = tiny_model(num_stages=1, interleaved=False, mask_info_flow=False, semantic_branch=False, semantic_fusion="none")
    report = topology_report(model, small_batch)
    assert report["mask_rcnn_structure"] and not report["cross_stage_mask_grad"]


def test_semantic_branch_without_fusion_does_not_reach_heads(small_batch):
    assert not topology_report(tiny_model(semantic_fusion="none"), small_batch)["semantic_reaches_heads"]


def test_variant_pipelines_keep_base_settings():
    base = tiny_pipeline()
    variants = variant_pipelines("components", base)
    assert [n for n, _ in variants] == ["cascade", "+interleaved", "+mask_info", "+semantic"]
    assert all(p.channels == TINY["channels"] for _, p in variants)
    assert variants[0][1].variant_name() == "cascade_mask_rcnn"
    assert variants[-1][1] == base
    betas = [p.semantic_loss_weight for _, p in variant_pipelines("beta", base)]
    assert betas == [0.5, 1.0, 2.0, 3.0]
    assert [p.semantic_fusion for _, p in variant_pipelines("fusion")] == ["none", "bbox", "mask", "both"]


def test_unknown_axis():
    with pytest.raises(ValueError, match="axis"):
        variant_pipelines("depth")


def test_format_table_layout():
    topo = dict.fromkeys(TOPOLOGY_KEYS, False)
    rows = []
    for name, pipe in variant_pipelines("components", PipelineConfig()):
        rows.append(
            {
                "variant": name,
                "interleaved": pipe.interleaved,
                "mask_info_flow": pipe.mask_info_flow,
                "semantic_fusion": pipe.semantic_fusion if pipe.semantic_branch else "-",
                "semantic_loss_weight": pipe.semantic_loss_weight,
                "box_ap": 0.5,
                "mask_ap": 0.25,
                "stage_mask_ap": {"stage 1": 0.1, "stage 1~3": 0.2},
                "topology": topo,
            }
        )
    table = format_table({"seeds": [0, 1, 2], "rows": rows})
    lines = table.splitlines()
    assert lines[0] == "seeds: [0, 1, 2]"
    assert lines[1].split()[:3] == ["variant", "interleaved", "mask_info"]
    assert len({len(line) for line in lines[1:6]}) == 1
    assert "0.500" in lines[2] and "0.250" in lines[2]
    assert "stage 1~3: 0.200" in table
