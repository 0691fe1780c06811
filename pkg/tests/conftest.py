import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from glwalk.linalg import rotation
from glwalk.measures import MatrixMeasure

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def bernoulli_walk_measure() -> MatrixMeasure:
    """{e R_a, e^-1 R_b} with equal weights: S_n is exactly a +-1 random walk (lambda 0, sigma2 1)."""
    return MatrixMeasure.finite_support([math.e * rotation(0.7), rotation(2.1) / math.e], [0.5, 0.5],
                                        strongly_irreducible=True, proximal=False)


def proximal_measure() -> MatrixMeasure:
    """Bounded finite support, strongly irreducible and proximal in d = 2."""
    return MatrixMeasure.finite_support(
        [np.array([[2.0, 1.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]),
         np.array([[0.0, 1.0], [-1.0, 0.5]])],
        [0.4, 0.3, 0.3], strongly_irreducible=True, proximal=True)


@pytest.fixture
def bern():
    return bernoulli_walk_measure()


@pytest.fixture
def prox():
    return proximal_measure()


@pytest.fixture
def diag21():
    return MatrixMeasure.point_mass(np.diag([2.0, 1.0]))


@pytest.fixture
def rot():
    return MatrixMeasure.rotation_dilation(2)


# -- acceptance reporting -----------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Print and keep one PASS/FAIL line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
