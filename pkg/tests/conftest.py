import numpy as np
import pytest

from mpcroute import protocol, trainer
from mpcroute.modelpool import ExpertSpec, ModelPool, RouterPolicy
from mpcroute.ring import DEFAULT_CODEC


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_pool(rng, widths_list, costs=None, scale=0.5):
    specs = [ExpertSpec(f"e{i}", w, float(costs[i]) if costs else float(i + 1))
             for i, w in enumerate(widths_list)]
    weights = []
    for s in specs:
        layer = []
        for (_, ws), (_, bs) in s.layout():
            layer.append(rng.normal(0, scale, ws))
            layer.append(rng.normal(0, scale, bs))
        weights.append(layer)
    return ModelPool.from_weights(specs, weights, DEFAULT_CODEC)


def random_router(rng, d, h, k, seq_len, scale=0.5):
    w = [rng.normal(0, scale, (d, h)), rng.normal(0, scale, h),
         rng.normal(0, scale, (h, k)), rng.normal(0, scale, k)]
    return RouterPolicy.from_weights(w, seq_len, DEFAULT_CODEC)


@pytest.fixture
def small_setup(rng):
    """A 3-expert heterogeneous pool over [4 x 3] embeddings, 2 classes."""
    seq, d = 4, 3
    pool = random_pool(rng, [(seq * d, 4, 2), (seq * d, 8, 2), (seq * d, 16, 2)])
    router = random_router(rng, d, 5, 3, seq)
    inputs = rng.normal(0, 1, (6, seq, d))
    return router, pool, inputs


@pytest.fixture(scope="session")
def demo():
    return trainer.demo_artifacts(7)


run_pair = protocol.run_pair


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    rep = outcome.get_result()
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    entry["seconds"] += rep.duration  # setup time includes any training fixtures
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {status}  {e['title']} ({e['seconds']:.1f}s)")
