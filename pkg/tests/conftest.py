import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one result line per acceptance criterion for the terminal summary."""
    rows = request.config.__dict__.setdefault("_acceptance_rows", [])

    def record(name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        rows.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "_acceptance_rows", None)
    if rows:
        terminalreporter.section("acceptance criteria")
        for line in rows:
            terminalreporter.write_line(line)
