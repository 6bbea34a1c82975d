import numpy as np
import pytest

from mlae.backbone import BackboneConfig
from mlae.trainer import TrainConfig, build_model, make_synthetic_task, train

TINY = BackboneConfig(L=2, d=16, heads=2, patch_tokens=4, token_dim=8, n_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_task():
    return make_synthetic_task(n_classes=4, n_train=32, n_val=16, n_test=32, difficulty=0.5, seed=3,
                               patch_tokens=4, token_dim=8)


@pytest.fixture(scope="session")
def trained_tiny(tiny_task):
    """A tiny MLAE model after a few epochs, shared read-only across tests."""
    cfg = TrainConfig(epochs=4, batch_size=8, lr=3e-3, r=4)
    model, schedule = build_model(TINY, cfg)
    result = train(model, tiny_task, cfg, schedule)
    return result


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")
