import logging

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(autouse=True)
def _quiet_profile_warnings(caplog):
    # power-law profiles at kappa = 1 - 2 mu sit on the sparsity bound by design
    caplog.set_level(logging.ERROR, logger="clspec.ensemble")
    yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
