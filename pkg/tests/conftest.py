import numpy as np
import pytest

from trajfuse.motion import default_skeleton, generate_synthetic, random_synth_params

from ._report import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def skeleton17():
    return default_skeleton(17)


@pytest.fixture
def periodic_sequences(skeleton17):
    return [generate_synthetic(random_synth_params(skeleton17, seed=100 + i, duration=30)) for i in range(3)]
