import numpy as np
import pytest

from bpre_lab.config import NAMED_LAWS
from bpre_lab.environment import from_dict


@pytest.fixture(scope="session")
def moderate():
    return from_dict(NAMED_LAWS["moderate"])


@pytest.fixture(scope="session")
def asymptotic():
    return from_dict(NAMED_LAWS["asymptotic"])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def rec(num: int, ok: bool, detail: str) -> bool:
        _CRITERIA[num] = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[num])
        return ok

    return rec


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
