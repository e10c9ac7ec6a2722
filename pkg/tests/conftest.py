"""
Shared pytest configuration.
"""

import logging

import pytest

from code_ssm.config import EncoderConfig
from code_ssm.numerics import Rng


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_config():
    """Encoder small enough for per-test forward and backward passes."""
    return EncoderConfig(n_layers=2, hidden_dim=8, state_size=4, vocab_size=261, max_position=64)


@pytest.fixture(autouse=True)
def quiet_logging(caplog):
    caplog.set_level(logging.WARNING)
    yield

