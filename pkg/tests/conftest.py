import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from rpolab.analysis import OveroptConfig, SweepConfig, gap_sweep, overopt_study  # noqa: E402
from rpolab.instances import figure1_dataset, figure1_instance, random_instance  # noqa: E402
from rpolab.preference import generate_dataset  # noqa: E402
from rpolab.rng import make_rng  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="module")
def fig1():
    return figure1_instance(), figure1_dataset()


@pytest.fixture(scope="module")
def small_problem():
    inst = random_instance(2, 4, seed=3)
    data = generate_dataset(inst, 40, make_rng(3, 1))
    return inst, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rate_sweep():
    """Full-size sample-size sweep, shared by the tests that inspect it."""
    t0 = time.perf_counter()
    res = gap_sweep(SweepConfig(seeds_per_N=20, method="minimax", hyper="theory"))
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def overopt_report():
    t0 = time.perf_counter()
    rep = overopt_study(OveroptConfig(K=4, M=6, d=2, N=200, seeds=20))
    return rep, time.perf_counter() - t0
