import warnings

import numpy as np
import pytest
from hypothesis import settings

warnings.filterwarnings("ignore", category=UserWarning, module="numba")

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

_ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        ok, text = _ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key:>2}: {text}")


@pytest.fixture
def record_criterion():
    def record(number, ok, text):
        _ACCEPTANCE[number] = (bool(ok), text)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_scene():
    from traverse_p2.sim import SceneSpec, run_pipeline

    report, scored = run_pipeline(SceneSpec())
    return report, scored
