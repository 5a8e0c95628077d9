import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict[int, tuple[bool, str, float]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one line per acceptance criterion: acceptance(n, passed, detail, seconds)."""
    def record(n: int, passed: bool, detail: str, seconds: float) -> None:
        ACCEPTANCE[n] = (bool(passed), detail, seconds)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail, seconds = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]")
