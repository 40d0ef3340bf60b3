import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("drcp", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("drcp")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    from drcp.config import PipelineConfig
    return PipelineConfig(grid_height=32, grid_width=64, train_frames=3, eval_frames=2, n_iter=30)


@pytest.fixture(scope="session")
def small_detector(small_cfg):
    from drcp.estimators import DRCPDetector
    from drcp.sim.sweep import train_scenes
    return DRCPDetector(small_cfg, n_iter=small_cfg.n_iter).fit(train_scenes(small_cfg))


@pytest.fixture(scope="session")
def small_suite(small_cfg, small_detector):
    from drcp.sim.sweep import Suite
    return Suite.build(small_cfg, detector=small_detector)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
