from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from refseg.synth import SceneSpec, generate_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def small_dataset():
    spec = SceneSpec(height=24, width=24, radius_range=(3, 7))
    return generate_dataset(spec, 5, n_labeled=3, n_unlabeled=6, n_val=3, n_test=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``criterion(n, passed, detail)``; lines are echoed in the terminal summary."""

    def record(n, passed, detail):
        CRITERIA[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}"
        print(CRITERIA[n])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
