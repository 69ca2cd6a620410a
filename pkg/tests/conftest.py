import sys

import numpy as np
import pytest

from linfty.domain import ShapeSpec, rasterize


@pytest.fixture(scope="session")
def square64():
    return rasterize(ShapeSpec.square(), 1 / 64)


@pytest.fixture(scope="session")
def square16():
    return rasterize(ShapeSpec.square(), 1 / 16)


@pytest.fixture(scope="session")
def interval64():
    return rasterize(ShapeSpec.interval(-1, 1), 1 / 64)


@pytest.fixture(scope="session")
def disk64():
    return rasterize(ShapeSpec.disk(0, 0, 1), 1 / 64)


@pytest.fixture(scope="session")
def disk128():
    return rasterize(ShapeSpec.disk(0, 0, 1), 1 / 128)


@pytest.fixture(scope="session")
def stadium64():
    return rasterize(ShapeSpec.stadium((-0.5, 0), (0.5, 0), 0.5), 1 / 64)


@pytest.fixture(scope="session")
def rect64():
    return rasterize(ShapeSpec.rectangle(-1, -0.5, 1, 0.5), 1 / 64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
    missing = [n for n in range(1, 13) if n not in results]
    if missing:
        terminalreporter.write_line(f"not run: {missing}")
