import numpy as np
import pytest

from optstop import EsoReward, PutReward, make_preset, solve_fundamental_pair

# criterion lines collected by test_acceptance and printed after the run
ACCEPTANCE = {}


def record(index, name, passed, detail=""):
    ACCEPTANCE[index] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d} {name}" + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def gbm():
    return make_preset("GBM", {"b": 0.02, "v": 0.3}, r=0.05)


@pytest.fixture(scope="session")
def gbm_pair(gbm):
    return solve_fundamental_pair(gbm)


@pytest.fixture(scope="session")
def eso_reward():
    return EsoReward(1.2, 1.0)


@pytest.fixture(scope="session")
def put_barrier():
    return PutReward(1.0, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
