import numpy as np
import pytest
import torch
from hypothesis import settings

from apvg.audiodata import ToyDatasetSpec, generate_toy_dataset
from apvg.core import PipelineConfig

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config() -> PipelineConfig:
    """Small image size and short training so model tests stay fast."""
    return PipelineConfig(
        image_size=64,
        toy_sequences=2,
        toy_frames=6,
        khp_steps=3,
        cvg_steps=3,
        fhvg_steps=3,
        fhvg_window=3,
        motion_dim=32,
        khp_hidden=32,
        audio_dim=32,
    )


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_toy_dataset(ToyDatasetSpec.from_config(small_config))


@pytest.fixture(scope="session")
def toy_dataset():
    """The default 8 x 32 toy dataset, for the long training-run checks."""
    return generate_toy_dataset(ToyDatasetSpec.from_config(PipelineConfig()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "heatmap renderer vs loop oracle and finite differences",
    2: "heatmap mass equals alpha * P",
    3: "causality of keypoint, coarse and final generators",
    4: "graph convolution permutation equivariance",
    5: "loss oracles",
    6: "metric oracles",
    7: "toy overfit, end to end",
    8: "ablation direction",
    9: "non-reproducibility statement",
    10: "determinism",
}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    ran = [i for i in ACCEPTANCE_TITLES if i in ACCEPTANCE_RESULTS]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for i, title in ACCEPTANCE_TITLES.items():
        if i not in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"criterion {i:2d} [{title}]: NOT RUN")
            continue
        ok, detail = ACCEPTANCE_RESULTS[i]
        terminalreporter.write_line(f"criterion {i:2d} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})")
