import math

import pytest

from moe_scaling import law

# Acceptance tests append (number, passed, detail) here; printed at the end of the run.
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def coeffs():
    return law.default_coefficients()


def oracle_e_hat(e, es=2.0732, em=290.4521):
    return 1.0 / (1.0 / (e - 1.0 + 1.0 / (1.0 / es - 1.0 / em)) + 1.0 / em)


def oracle_loss(n, d, e, k=None):
    """Joint law evaluated term by term in plain floating point."""
    k = k or law.default_coefficients()
    h = oracle_e_hat(e, k.e_start, k.e_max)
    lh = math.log(h)
    return (
        k.a * h**k.delta * n ** (k.alpha + k.gamma * lh)
        + k.b * h**k.omega * d ** (k.beta + k.zeta * lh)
        + k.c
    )
