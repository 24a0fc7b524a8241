import numpy as np
import pytest

from sorpfit.dataset import bundled_table1
from sorpfit.models import PRIOR_BOUNDS


@pytest.fixture(scope="session")
def table1():
    return bundled_table1()


def prior_arrays(model):
    b = np.array(PRIOR_BOUNDS[model], dtype=float)
    return b[:, 0], b[:, 1]


def prior_draws(model, n, seed=0):
    lo, hi = prior_arrays(model)
    return lo + (hi - lo) * np.random.default_rng(seed).random((n, lo.size))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def report_criterion(number: int, title: str, checks: dict) -> bool:
    """Print ``ACCEPTANCE <n> PASS|FAIL`` with the failing sub-checks and return the outcome."""
    ok = all(v for v, _ in checks.values())
    failed = [f"{k} ({detail})" for k, (v, detail) in checks.items() if not v]
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title}"
    if failed:
        line += " | failing: " + "; ".join(failed)
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
