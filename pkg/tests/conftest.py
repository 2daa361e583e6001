import numpy as np
import pytest

from simplihumon.model import ModelConfig

# Acceptance outcomes, filled by tests/test_acceptance.py and echoed at the end.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=1, d_model=8, n_heads=2, past_frames=2, future_frames=2, n_joints=2, n_proposals=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split()[0].lstrip("AC"))):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
