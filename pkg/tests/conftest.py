import copy
import sys

import numpy as np
import pytest

from skyseg import config as cfgmod
from skyseg.world import generate_scene

SMALL_CHANNELS = [8, 8, 16, 16, 24, 24]


def small_config(**overrides) -> dict:
    """A model-backed scenario small enough for 100-round missions."""
    cfg = copy.deepcopy(cfgmod.DEFAULTS)
    cfg["scene"].update(width=192, height=128, num_classes=4)
    cfg["leader"].update(height=64, width=96, input_size=64)
    cfg["follower"].update(channels=list(SMALL_CHANNELS), stage_starts=[2, 4], stem_pool=4)
    for key, value in overrides.items():
        cfgmod.set_key(cfg, key, value)
    cfgmod.validate(cfg)
    return cfg


def oracle_config(**overrides) -> dict:
    cfg = copy.deepcopy(cfgmod.DEFAULTS)
    cfg["scene"].update(width=600, height=400, num_classes=6)
    cfg["leader"].update(backend="oracle", height=200, width=300)
    cfg["follower"].update(backend="oracle")
    for key, value in overrides.items():
        cfgmod.set_key(cfg, key, value)
    cfgmod.validate(cfg)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(3, 192, 128, 4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)
