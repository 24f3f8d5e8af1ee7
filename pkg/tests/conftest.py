import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """Recorder for acceptance criteria: one pass/fail line per criterion, repeated in the summary."""
    def record(number: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
        ok_all = ok and elapsed < budget
        line = (f"criterion {number:>2} [{'PASS' if ok_all else 'FAIL'}] {title}: {detail} "
                f"(runtime {elapsed:.2f} s, budget {budget:g} s)")
        _ACCEPTANCE[number] = line
        print(line)
        return ok_all
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
