"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from gammaunmix.signatures import ChannelGrid, SignatureLibrary, synthetic_library
from gammaunmix.variability import ShiftModel, synthetic_manifold

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    key = f"{mark.args[0]:>2}. {mark.args[1]}"
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        prev = _ACCEPTANCE.get(key, ("PASS", ""))[0]
        if prev == "FAIL":
            status = "FAIL"
        _ACCEPTANCE[key] = (status, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        status, name = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{status}  {key}  ({name})")


@pytest.fixture(scope="session")
def library() -> SignatureLibrary:
    return synthetic_library()


@pytest.fixture(scope="session")
def small_grid() -> ChannelGrid:
    return ChannelGrid(256, 8.0, 20.0)


@pytest.fixture(scope="session")
def small_library(small_grid) -> SignatureLibrary:
    return synthetic_library(small_grid)


@pytest.fixture(scope="session")
def manifold():
    return synthetic_manifold()


@pytest.fixture(scope="session")
def shift_model(library) -> ShiftModel:
    return ShiftModel(library)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
