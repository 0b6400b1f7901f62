import numpy as np
import pytest

from c2fclip import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> bool:
    """Remember a one-line verdict for the end-of-session acceptance summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
