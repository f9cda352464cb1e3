import numpy as np
import pytest

from omnitraj.model import ModelConfig
from omnitraj.synthgen import SETUP_1, GenSpec, generate, windows_for_setup


def tiny_config(**kw):
    base = dict(d_model=16, n_heads=2, cme_layers=1, hie_layers=1, pid_decoder_layers=1,
                n_modes=2, n_ctx_queries=2, max_t_obs=10, max_t_pred=20)
    base.update(kw)
    return ModelConfig(**base)


def social_samples(n_scenes=4, n_agents=3, setup=SETUP_1, seed=0):
    spec = GenSpec(kind="social", n_scenes=n_scenes, n_agents=n_agents, seed=seed, noise_std=0.01)
    return windows_for_setup(generate(spec), setup)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def samples():
    return social_samples()


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, name, passed, detail):
    """Store one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2} {name}: {detail}")
