import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from inrquant.nervlite import ModelSpec, TrainOptions, build_model, train
from inrquant.video import synthetic_clip

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DESK_EPOCHS = 300

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def desk_clip():
    return synthetic_clip(0, 16, 32, 32, "blobs")


@pytest.fixture(scope="session")
def desk_model(desk_clip):
    """Default NeRV-lite (~20k params) fitted to the seeded blobs clip."""
    return train(build_model(ModelSpec(), seed=0), desk_clip, TrainOptions(epochs=DESK_EPOCHS))


@pytest.fixture(scope="session")
def tiny_spec():
    # 4x4 output, 4 frames, 246 parameters
    return ModelSpec(posenc_freqs=2, stem_dims=(4,), seed_shape=(2, 2, 2), blocks=((2, 2),), frames=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
