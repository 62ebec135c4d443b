import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybrid_rl import policy as P
from hybrid_rl.config import PolicyConfig, TaskConfig
from hybrid_rl.toyworld import ToyWorld

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# small enough for exhaustive finite differences
TINY_TASK = TaskConfig(vocab_size=18, visual_dim=5)
TINY_POLICY = PolicyConfig(encoder_dim=4, context_dim=3, token_dim=2, hidden_dim=4, init_scale=0.5)


@pytest.fixture(scope="session")
def world():
    return ToyWorld()


@pytest.fixture(scope="session")
def tiny_world():
    return ToyWorld(TINY_TASK)


@pytest.fixture(scope="session")
def params(world):
    return P.init_params(PolicyConfig(init_scale=0.5), world.config.vocab_size, world.config.visual_dim,
                         "head_plus_adapter", seed=3)


def tiny_params(configuration="head_plus_adapter", seed=0):
    return P.init_params(TINY_POLICY, TINY_TASK.vocab_size, TINY_TASK.visual_dim, configuration, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        criteria = sorted((s for s in ACCEPTANCE_LINES if s.startswith("CRITERION")),
                          key=lambda s: int(s.split()[1].rstrip(":")))
        for line in criteria + [s for s in ACCEPTANCE_LINES if not s.startswith("CRITERION")]:
            terminalreporter.write_line(line)
