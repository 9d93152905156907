import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tptsumm import tensor as T
from helpers import tiny_config
from tptsumm.model import TPTransformer
from tptsumm.rng import Rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(params=["baseline", "tpt-c", "tpt-d"])
def variant(request):
    return request.param


@pytest.fixture
def tiny_model(variant):
    return TPTransformer(tiny_config(variant, init_std=0.3), seed=3)


# --- acceptance summary: one verdict line per criterion -------------------------------------

_verdicts: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or rep.failed):
        n = marker.args[0]
        _verdicts[n] = _verdicts.get(n, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    from helpers import CRITERIA, DETAILS
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        line = f"criterion {n:>2} {CRITERIA[n]:<28} {'PASS' if _verdicts[n] else 'FAIL'}"
        if DETAILS.get(n):
            line += "  " + "; ".join(DETAILS[n])
        terminalreporter.write_line(line)
