from pathlib import Path

import numpy as np
import pytest

from espretrain.model import ModelConfig

DATA_DIR = Path(__file__).parent / "data"
CORPUS = DATA_DIR / "corpus.txt"


@pytest.fixture
def corpus_path():
    return CORPUS


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=1, hidden=8, heads=2, kv_heads=1, head_dim=4, intermediate=16, vocab=11, max_seq=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the summary."""
    lines = []
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
