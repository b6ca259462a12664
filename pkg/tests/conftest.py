import numpy as np
import pytest

VERDICTS: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20231016)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, printed in the run summary."""

    def record(number, name, ok, detail, label=None):
        VERDICTS.append(f"[{label or ('PASS' if ok else 'FAIL')}] criterion {number}: {name} :: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
