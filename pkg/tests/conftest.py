import pytest

from jumpfbsde.model import builtin_problem
from jumpfbsde.noise import TimeGrid, generate_noise

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def record():
    """Print and keep one PASS/FAIL line per acceptance criterion."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _record


@pytest.fixture(scope="session")
def lq_small():
    problem = builtin_problem("lq_jump", s=1.0, fx=0.2, fy=0.2)
    grid = TimeGrid(problem.T, 50)
    noise = generate_noise(grid, problem.markspace, 3000, 3)
    return problem, grid, noise
