import numpy as np
import pytest

from htc.cascade import HybridTaskCascade
from htc.config import PipelineConfig, ProposalConfig
from htc.dataset import generate_dataset

TINY = dict(channels=8, fc_width=32, backbone_widths=(4, 8, 8, 8), proposals=ProposalConfig(n_jitter=4, n_random=8))


def tiny_pipeline(**kw) -> PipelineConfig:
    return PipelineConfig(**{**TINY, **kw})


def tiny_model(seed=0, **kw) -> HybridTaskCascade:
    return HybridTaskCascade(tiny_pipeline(**kw), seed=seed, dtype=np.float64)


@pytest.fixture(scope="session")
def small_batch():
    return generate_dataset(2, 21, image_size=64, n_instances_range=(2, 3))


CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
