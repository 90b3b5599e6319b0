import numpy as np
import pytest

from htc.config import StageConfig
from htc.proposals import (
    assign,
    assign_and_sample,
    crop_mask_targets,
    dense_proposals,
    generate_proposals,
)
from htc.roi import box_iou

GT = np.array([[10.0, 12.0, 40.0, 50.0], [60.0, 20.0, 100.0, 70.0]])


def _stage(thr, n=64, frac=0.5):
    return StageConfig(index=0, iou_threshold=thr, loss_weight=1.0, samples_per_image=n, positive_fraction=frac)


def _masks(h=128, w=128):
    m = np.zeros((2, h, w), dtype=np.uint8)
    m[0, 15:45, 12:38] = 1
    m[1, 25:65, 62:98] = 1
    return m


def test_zero_noise_jitter_reproduces_gt():
    props = generate_proposals(GT, 128, 0, n_jitter=1, n_random=0, center_sigma=0.0, scale_sigma=0.0)
    np.testing.assert_allclose(props, GT, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_proposals_inside_image(seed):
    props = generate_proposals(GT, (96, 128), seed, n_jitter=16, n_random=64, center_sigma=0.6, scale_sigma=0.8)
    assert props.shape == (2 * 16 + 64, 4)
    assert (props[:, 0] >= 0).all() and (props[:, 1] >= 0).all()
    assert (props[:, 2] <= 128).all() and (props[:, 3] <= 96).all()
    assert (props[:, 2] - props[:, 0] >= 1).all() and (props[:, 3] - props[:, 1] >= 1).all()


def test_proposals_deterministic():
    a = generate_proposals(GT, 128, [3, 1, 0])
    b = generate_proposals(GT, 128, [3, 1, 0])
    np.testing.assert_array_equal(a, b)
    c = generate_proposals(GT, 128, [3, 1, 1])
    assert not np.array_equal(a, c)


def test_empty_gt_is_an_error():
    with pytest.raises(ValueError, match="at least one"):
        generate_proposals(np.zeros((0, 4)), 128, 0)


def test_dense_proposals_cover_image():
    props = dense_proposals(64, stride=8)
    assert len(props) == 8 * 8 * 9
    assert props.min() >= 0 and props.max() <= 64


@pytest.mark.parametrize("thr", [0.3, 0.5, 0.7, 0.95])
def test_proposal_equal_to_gt_is_positive_with_zero_deltas(thr):
    out = assign_and_sample(GT[1:], GT, [1, 2], _masks(), _stage(thr), 0)
    assert out.num_pos == 1
    assert out.labels[0] == 2 and out.matched_gt[0] == 1
    np.testing.assert_allclose(out.box_targets, 0.0, atol=1e-12)


def test_disjoint_proposal_is_background():
    far = np.array([[110.0, 100.0, 127.0, 127.0]])
    out = assign_and_sample(far, GT, [1, 2], _masks(), _stage(0.5), 0)
    assert out.num_pos == 0
    assert out.labels.tolist() == [0] and out.matched_gt.tolist() == [-1]
    assert out.box_targets.shape == (0, 4) and out.mask_targets.shape == (0, 28, 28)


def test_ties_go_to_lowest_gt_index():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
    matched, _ = assign(np.array([[0.0, 0.0, 10.0, 10.0]]), gt, 0.5)
    assert matched.tolist() == [0]


@pytest.mark.parametrize("seed", range(5))
def test_positive_sets_shrink_with_threshold(seed):
    props = generate_proposals(GT, 128, seed, n_jitter=40, n_random=20)
    ious = box_iou(props, GT).max(axis=1)
    prev = None
    for thr in (0.5, 0.55, 0.6, 0.65, 0.7):
        matched, _ = assign(props, GT, thr)
        pos = set(np.nonzero(matched >= 0)[0])
        assert pos == set(np.nonzero(ious >= thr)[0])
        if prev is not None:
            assert pos <= prev
        prev = pos


def test_sampling_respects_budget_and_orders_positives_first():
    props = generate_proposals(GT, 128, 1, n_jitter=60, n_random=60)
    out = assign_and_sample(props, GT, [1, 2], _masks(), _stage(0.5, n=32, frac=0.25), 7)
    assert len(out.rois) == 32
    assert out.num_pos <= 8
    assert (out.labels[: out.num_pos] > 0).all() and (out.labels[out.num_pos :] == 0).all()
    again = assign_and_sample(props, GT, [1, 2], _masks(), _stage(0.5, n=32, frac=0.25), 7)
    np.testing.assert_array_equal(out.rois, again.rois)


def _crop_oracle(mask, box, size):
    x1, y1, x2, y2 = box
    h, w = mask.shape
    out = np.zeros((size, size), dtype=np.uint8)
    for i in range(size):
        for j in range(size):
            y = y1 + (i + 0.5) * (y2 - y1) / size
            x = x1 + (j + 0.5) * (x2 - x1) / size
            yi, xi = int(np.floor(y)), int(np.floor(x))
            if 0 <= yi < h and 0 <= xi < w:
                out[i, j] = mask[yi, xi]
    return out


@pytest.mark.parametrize("seed", range(5))
def test_mask_targets_match_brute_force_crop(seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((40, 50)) < 0.5).astype(np.uint8)
    boxes = np.sort(rng.uniform(-5, 55, (6, 2, 2)), axis=1).reshape(6, 4)[:, [0, 2, 1, 3]]
    boxes[:, 2:] += 1
    got = crop_mask_targets(np.repeat(mask[None], 6, axis=0), boxes, 28)
    for k in range(6):
        np.testing.assert_array_equal(got[k], _crop_oracle(mask, boxes[k], 28))


def test_mask_target_of_exact_gt_proposal():
    masks = _masks()
    out = assign_and_sample(GT, GT, [1, 2], masks, _stage(0.5), 0)
    for k in range(2):
        np.testing.assert_array_equal(out.mask_targets[k], _crop_oracle(masks[out.matched_gt[k]], out.rois[k], 28))
    assert set(np.unique(out.mask_targets)) <= {0, 1}
