import numpy as np
import pytest

from mrmp.autodiff import Tensor

_CRITERIA: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one human-readable pass/fail line for the acceptance summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        _CRITERIA.append(f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))
        print(_CRITERIA[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)


def leaf(x, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)
