import numpy as np
import pytest
from hypothesis import settings

from fdalign.diffusion import NoiseSchedule
from fdalign.divergence import FORWARD_KL, JS, REVERSE_KL, alpha_divergence
from fdalign.trainer import pretrain_reference, ring_dataset

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

FOUR = [REVERSE_KL, FORWARD_KL, alpha_divergence(0.6), JS]
ALL_KINDS = FOUR + [alpha_divergence(a) for a in (0.2, 0.4, 0.8)]


@pytest.fixture(params=FOUR, ids=lambda d: d.name)
def div(request):
    return request.param


@pytest.fixture(scope="session")
def desk_schedule():
    return NoiseSchedule.desk(50)


@pytest.fixture(scope="session")
def ring_reference(desk_schedule):
    """The frozen reference used by the alignment checks: ~20 s to train, built once."""
    points, conds = ring_dataset(2048, 4, seed=0)
    return pretrain_reference(desk_schedule, points, conds, epochs=1000, lr=2e-3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
