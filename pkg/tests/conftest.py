import time

import pytest

from ttadet.bench import SceneSpec, generate_dataset
from ttadet.detector import ModelConfig
from ttadet.source import PretrainConfig, fit_source_stats, pretrain

TIMINGS: dict = {}
_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")


@pytest.fixture(scope="session")
def source_model():
    """Default detector pretrained on clean scenes (seed 0), shared across the session."""
    cfg = PretrainConfig()
    start = time.perf_counter()
    params = pretrain(ModelConfig(), generate_dataset(SceneSpec(), cfg.n_train), cfg, seed=0)
    TIMINGS["pretrain"] = time.perf_counter() - start
    return params


@pytest.fixture(scope="session")
def source_stats(source_model):
    scenes = [s for s, _ in generate_dataset(SceneSpec(), 500)]
    return fit_source_stats(source_model, scenes)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _VERDICTS[number] = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
