import numpy as np
import pytest

from octcodec.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def small_model():
    """Untrained default-width model with a short context, shared read-only."""
    return init_model(ModelConfig(d_model=16, heads=2, layers_per_branch=2, ffn_mult=2, context_depth=3,
                                  max_depth=10, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines together at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
