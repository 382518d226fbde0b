import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from conunetr import tensor as T
from conunetr.data import DatasetConfig, build_manifest, materialize
from conunetr.model import preset_config

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = getattr(report, "criterion", (None, None))
    if number is not None:
        _ACCEPTANCE[number] = (title, report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}")


@pytest.fixture(autouse=True)
def _restore_engine_state():
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return preset_config("tiny")


@pytest.fixture(scope="session")
def small_data():
    """Two ages, one train and one test volume each, at 64 px."""
    cfg = DatasetConfig(
        img_size=64, total_slices=40, budget_fraction=0.1, train_per_age=1, test_per_age=1,
        cohorts=((0, 0, True), (0, 2, True), (1, 1, False)),
    )
    manifest = build_manifest(cfg)
    return manifest, materialize(manifest)
