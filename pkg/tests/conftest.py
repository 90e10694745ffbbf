import numpy as np
import pytest

from morphkit.volume import make_rng


@pytest.fixture
def rng():
    return make_rng(20240917)


def grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))


ACCEPTANCE = []


def record_criterion(number, passed, detail):
    """Collect one line per acceptance criterion for the terminal summary."""
    ACCEPTANCE.append((number, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
