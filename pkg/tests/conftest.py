import pytest

from msfem_lab.problem import Discretization, ProblemSpec

# Verdict lines of the acceptance suite, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_problem():
    return ProblemSpec(alpha=1 / 32, delta=0.5, eps=1 / 16)


@pytest.fixture(scope="session")
def desk(desk_problem):
    """Desk-scale discretization: H = 1/8, h = 1/256."""
    return Discretization(desk_problem, 1 / 8, ratio=32)


@pytest.fixture(scope="session")
def small():
    """Tiny 2D multiscale discretization for fast structural tests."""
    return Discretization(ProblemSpec(alpha=1 / 16, delta=0.5, eps=1 / 8), 1 / 4, ratio=8)
