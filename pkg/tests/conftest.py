import numpy as np
import pytest

from dualstream import kernels
from dualstream.data import BoundarySample, CaptionTriplet
from dualstream.model import ModelConfig, ModelParams

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sample(rng, t_app=3, t_mot=2, regions=4, d_app=6, d_mot=5, d_reg=7, n_types=3,
                boundary_id="s0") -> BoundarySample:
    return BoundarySample(
        boundary_id, rng.standard_normal((t_app, d_app)), rng.standard_normal((t_mot, d_mot)),
        rng.standard_normal((regions, d_reg)), int(rng.integers(n_types)),
        CaptionTriplet((7, 8), (9, 10, 11), (12,)),
    )


def tiny_config(**overrides) -> ModelConfig:
    values = dict(vocab_size=20, n_types=3, layers=1, d=16, heads=2, d_emb=8, d_app=6, d_mot=5,
                  d_reg=7, d_typ=4, max_caption_len=8, max_frames=8)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny():
    """(config, params, sample) for a small random model."""
    r = np.random.default_rng(99)
    cfg = tiny_config()
    return cfg, ModelParams.initialize(cfg, seed=5), make_sample(r)
