import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparse_s5.s5 import ModelSpec, init_random, relufy

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_spec():
    return ModelSpec(depth=2, n_input=10, n_model=12, n_ssm=14, n_output=9)


@pytest.fixture
def tiny_model(tiny_spec):
    return init_random(tiny_spec, seed=3)


@pytest.fixture
def tiny_relu(tiny_model):
    return relufy(tiny_model)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# ---------------------------------------------------------------------------
# acceptance reporting: one summary line per criterion

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    prev = _ACCEPTANCE.get(n)
    ok = rep.passed and (prev is None or prev[0])
    _ACCEPTANCE[n] = (ok, title, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title, detail = _ACCEPTANCE[n]
        line = f"acceptance {n:>2} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
