import numpy as np
import pytest

from burst_otfs.model import SystemConfig

ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one PASS/FAIL line for the acceptance summary and echo it."""
    line = f"ACCEPTANCE criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[criterion] = line
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def small_cfg():
    return SystemConfig(L=16, N_BS=8, M_theta=24, N_tau=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
