import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from occmesh.synthdata import SceneConfig, generate_scene, toy_spec

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def spec():
    return toy_spec()


@pytest.fixture(scope="session")
def small_scenes():
    """Eight two-person scenes across the three overlap presets."""
    presets = ["clear", "occluded", "severe"]
    return [generate_scene(SceneConfig.from_preset(presets[k % 3], seed=100 + k)) for k in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = terminalreporter.config.pluginmanager.get_plugin("tests.test_acceptance")
    if acceptance is None:
        import sys

        acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
