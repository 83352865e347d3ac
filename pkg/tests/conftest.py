import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from capnav.config import Config
from capnav.world import Capability, Scene

_criteria: dict[int, list[tuple[str, bool]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria.setdefault(mark.args[0], []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _criteria[n]
        failed = [name for name, ok in results if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = f"{len(results)} checks" if not failed else "failed: " + ", ".join(failed)
        terminalreporter.write_line(f"criterion {n}: {status} ({detail})")


settings.register_profile("capnav", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("capnav")


@pytest.fixture
def cfg() -> Config:
    return Config.for_preset("desk")


def empty_scene(width=20.0, height=20.0, capability=Capability.REACHING) -> Scene:
    return Scene((-width / 2, -height / 2, width / 2, height / 2), (), (), (), capability, 0)


def rng(seed=0):
    return np.random.default_rng(seed)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b))))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


TAU = 2 * math.pi
