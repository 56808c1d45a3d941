import numpy as np
import pytest

from hotcount import _pykernels
from hotcount.lifecycle import Engine, EngineConfig, RetentionPolicy, SketchConfig
from hotcount.tables import FeatureSchema, Observation

try:
    from hotcount import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, text = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else "FAIL"
        prev = _criteria.get(num)
        # a criterion passes only if every test carrying it passes
        if prev is None or prev[0] == "PASS":
            _criteria[num] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria, key=int):
        status, text = _criteria[num]
        terminalreporter.write_line(f"[{status}] criterion {num:>2}: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def schema():
    return FeatureSchema.from_dict({
        "features": [{"name": "user"}, {"name": "item"}],
        "label": {"name": "click", "values": ["0", "1"]},
    })


def make_engine(schema, retention=3, mode="flat", privacy=None, width=1 << 12,
                hot=1000, seed=7, **kw):
    return Engine(
        schema,
        RetentionPolicy(hot_capacity=hot, retention=retention, mode=mode),
        EngineConfig(SketchConfig(width=width), privacy=privacy, **kw),
        seed=seed,
    )


def obs(user, item, label, p=1.0, ts=0.0):
    return Observation({"user": str(user), "item": str(item)}, str(label), p, ts)
