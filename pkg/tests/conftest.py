import sys

import numpy as np
import pytest

from pdclf.cli import build_spec, build_system, read_scenario, scenario_hash
from pdclf.runtime import PdClf
from pdclf.synthesis import synthesize


@pytest.fixture(scope="session")
def toy_cfg():
    return read_scenario("toy")


@pytest.fixture(scope="session")
def toy_system(toy_cfg):
    return build_system(toy_cfg)


@pytest.fixture(scope="session")
def toy_cert(toy_cfg, toy_system):
    res = synthesize(build_spec(toy_cfg, toy_system, "pd"), scenario_hash=scenario_hash(toy_cfg))
    assert res.optimal, res.diagnostics
    return res.certificate


@pytest.fixture(scope="session")
def toy_robust_cert(toy_cfg, toy_system):
    res = synthesize(build_spec(toy_cfg, toy_system, "robust"),
                     scenario_hash=scenario_hash(toy_cfg))
    assert res.optimal, res.diagnostics
    return res.certificate


@pytest.fixture(scope="session")
def toy_clf(toy_cert, toy_system):
    return PdClf(toy_cert, toy_system)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
