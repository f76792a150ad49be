import math

import pytest
from hypothesis import HealthCheck, settings

from qwell import build_free_basis, diagonalize_sigma

# no randomness in the artifact: property tests replay a fixed example set
settings.register_profile("qwell", derandomize=True, deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qwell")


@pytest.fixture(scope="session")
def basis20():
    return build_free_basis(20)


@pytest.fixture(scope="session")
def basis200():
    return build_free_basis(200)


@pytest.fixture(scope="session")
def sys20(basis20):
    return diagonalize_sigma(basis20, 20.0)


PI = math.pi


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary lists them all."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  ({detail})"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
