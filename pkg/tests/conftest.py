import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from incline.corpus import BilingualSpec, gen_bilingual
from incline.model import ModelConfig, new_transformer

settings.register_profile(
    "incline", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "incline"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return BilingualSpec(n_content_tokens=6, n_shift_tokens=2, seq_len=5, n_train=40, n_val=20, n_test=30, n_parallel=25)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return gen_bilingual(small_spec)


@pytest.fixture(scope="session")
def tiny_model(small_spec):
    """Untrained 2-layer model with non-trivial random weights."""
    cfg = ModelConfig(vocab_size=small_spec.vocab_size, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=24, seed=3)
    model = new_transformer(cfg)
    # init std 0.02 makes every output nearly uniform; scale up so argmaxes are informative
    for k, v in model.params.items():
        if not k.endswith(("_g", "_b")) and k != "head_b":
            model.params[k] = v * 40.0
    return model


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion lines collected by the acceptance suite, echoed in the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
