import numpy as np
import pytest

from orsp.data import SyntheticConfig, generate
from orsp.domain import ModelConfig

TINY = dict(d_ctx=12, d_img=6, d_emb=6, d_hist=8, d_mlp=10, vocab_size=19)

_acceptance: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture(scope="session")
def trials():
    return generate(SyntheticConfig(n_trials=40, seed=5))


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        n, title = props["criterion"]
        _acceptance[n] = (title, "PASS" if report.outcome == "passed" else "FAIL", props.get("detail", ""))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
