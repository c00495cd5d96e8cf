import numpy as np
import pytest

from multilora.model import ModelConfig

# acceptance tests append (criterion, passed, detail) here; printed at the end
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=16, n_heads=2, d_mid=24, n_layers=2, vocab=12, max_seq=16)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
