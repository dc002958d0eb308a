import hypothesis
import numpy as np
import pytest

from pathnet.network import NetConfig, ParameterGrid
from pathnet.numerics import rng_stream

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return NetConfig(layers=3, modules_per_layer=10, neurons_per_module=6, max_modules_per_layer=3, input_dim=7)


@pytest.fixture
def small_grid(small_cfg):
    grid = ParameterGrid(small_cfg, rng_stream(123))
    grid.add_head("t", 3, rng_stream(123, 1))
    return grid


# acceptance criterion results, printed once per criterion at the end of the run
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (name, passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if passed else 'FAIL'} ({detail})")
