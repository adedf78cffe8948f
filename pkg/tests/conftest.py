import numpy as np
import pytest

from config import RunConfig, apply_overrides
from dataset import EpisodeArrays


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def deterministic_ops():
    from utils import configure_tensorflow

    configure_tensorflow(deterministic=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_config(**train):
    """
    Model small enough for per-test training: 8x8 frames, 26 tokens, two 16-wide blocks
    """
    cfg = RunConfig()
    apply_overrides(cfg.model, {"d_model": 16, "n_heads": 2, "n_blocks": 2, "freq_dim": 16, "l_text": 4,
                                "image_size": 8})
    apply_overrides(cfg.diffusion, {"timesteps": 50, "sample_steps": 5})
    apply_overrides(cfg.train, {"batch_size": 4, "steps": 4, "checkpoint_interval": 2, "log_interval": 1,
                                "learning_rate": 1e-3})
    apply_overrides(cfg.train, train)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return make_tiny_config()


def make_episodes(n_episodes=3, n_actions=9, seed=0, l_text=4):
    rng = np.random.default_rng(seed)
    return [EpisodeArrays(rng.integers(0, 256, size=(2 * n_actions + 1, 8, 8, 3)).astype(np.uint8),
                          rng.uniform(-1, 1, size=(n_actions, 7)).astype(np.float32),
                          rng.integers(2, 20, size=l_text).astype(np.int32), "pick_place", "A")
            for _ in range(n_episodes)]
