import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scse.data import DatasetSpec, generate_synthetic_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small 4-class dataset for fast training-loop checks."""
    return generate_synthetic_dataset(DatasetSpec(num_train=12, num_val=4, num_test=4, size=16, seed=3))


@pytest.fixture(scope="session")
def desk_dataset():
    """The desk-scale task: 4 classes, 32x32, 200/25/25 samples, seed 42."""
    return generate_synthetic_dataset(DatasetSpec())


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail, extra="")``."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number, passed, detail, extra=""):
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _CRITERIA.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
            for row in extra.splitlines():
                tr.write_line(row)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
