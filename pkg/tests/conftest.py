import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refillkv import numkernel
from refillkv.model import ModelConfig, init_model


@pytest.fixture(params=numkernel.available_backends())
def kern(request):
    return numkernel.kernels(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return init_model(ModelConfig(seed=7))


def random_tokens(seed, n, vocab=62):
    return np.random.default_rng(seed).integers(0, vocab, n)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
