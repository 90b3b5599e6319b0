import numpy as np
import pytest

from htc.backbone import LEVEL_NAMES, Backbone, FeaturePyramid, SemanticBranch
from htc.diffcore import ops
from htc.diffcore.tensor import Tensor


def _nets(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Backbone(rng, dtype=dtype), SemanticBranch(rng, dtype=dtype)


def test_pyramid_shapes():
    bb, _ = _nets()
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 128, 128)).astype(np.float32))
    pyr = bb(x)
    assert [pyr.levels[k].shape for k in LEVEL_NAMES] == [(2, 32, 32, 32), (2, 32, 16, 16), (2, 32, 8, 8), (2, 32, 4, 4)]


@pytest.mark.parametrize("size", [64, 96, 128, 160])
def test_semantic_map_at_stride_8(size):
    bb, sem = _nets()
    x = Tensor(np.random.default_rng(2).standard_normal((1, 3, size, size)).astype(np.float32))
    out = sem(bb(x))
    assert out.features.shape == (1, 32, size // 8, size // 8)
    assert out.logits.shape == (1, 4, size // 8, size // 8)


def test_rejects_sizes_not_divisible_by_32():
    bb, _ = _nets()
    with pytest.raises(ValueError, match="divisible by 32"):
        bb(Tensor(np.zeros((1, 3, 100, 128), np.float32)))


def test_every_parameter_receives_gradient():
    bb, sem = _nets(dtype=np.float64)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 3, 64, 64)))
    pyr = bb(x)
    out = sem(pyr)
    loss = ops.add_n([ops.sum_all(ops.mul(lv, lv)) for lv in pyr.as_list()] + [ops.sum_all(out.logits)])
    loss.backward()
    for name, p in list(bb.named_parameters()) + list(sem.named_parameters()):
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_every_level_feeds_the_semantic_map():
    bb, sem = _nets(dtype=np.float64)
    pyr = bb(Tensor(np.random.default_rng(4).standard_normal((1, 3, 64, 64))))
    base = sem(pyr).features.data
    for k in LEVEL_NAMES:
        levels = dict(pyr.levels)
        levels[k] = Tensor(np.zeros(levels[k].shape))
        changed = sem(FeaturePyramid(levels, pyr.channels)).features.data
        assert not np.allclose(changed, base), k


def test_zero_features_give_bias_logits():
    _, sem = _nets(dtype=np.float64)
    sem.logits.bias.data = np.array([0.1, -0.2, 0.3, 0.4])
    zeros = {k: Tensor(np.zeros((1, 32, 64 // s, 64 // s))) for k, s in zip(LEVEL_NAMES, (4, 8, 16, 32))}
    out = sem(FeaturePyramid(zeros, 32))
    np.testing.assert_allclose(out.logits.data[0, :, 3, 5], [0.1, -0.2, 0.3, 0.4])
