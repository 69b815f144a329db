import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240615)


def lapack_singular_values(m):
    """Full-SVD oracle, independent of the package's Jacobi kernel."""
    return np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def report(request):
    """Record one acceptance line; the terminal summary prints them in order."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
