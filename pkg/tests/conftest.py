import numpy as np
import pytest

from calr.corpus import bundled_corpus_path, load_corpus
from calr.model import ModelConfig, init_model

TINY = ModelConfig(d_model=16, n_layers=3, n_heads=2, d_ff=32, max_seq_len=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY)


@pytest.fixture(scope="session")
def tiny_corpus():
    return load_corpus(bundled_corpus_path(), seq_len=TINY.max_seq_len, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
