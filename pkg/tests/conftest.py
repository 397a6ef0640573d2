from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamttt.driftgen import load_stream_dump
from streamttt.ymodel import load_checkpoint

settings.register_profile("repo", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

FIXTURES = Path(__file__).parent / "fixtures"
CHECKPOINT_FIXTURE = FIXTURES / "checkpoint-train.ut3c"
SOURCE_FIXTURE = FIXTURES / "source-fixture.ut3s"


@pytest.fixture(scope="session")
def trained():
    return load_checkpoint(CHECKPOINT_FIXTURE)


@pytest.fixture(scope="session")
def source_frames():
    return load_stream_dump(SOURCE_FIXTURE)[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
