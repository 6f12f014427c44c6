import math

import numpy as np
import pytest

from feddap_sim.prototypes import PrototypeTable


def py_cosine(a, b):
    """Scalar-loop cosine used as an oracle."""
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return max(-1.0, min(1.0, dot / (na * nb)))


def central_diff(f, arr, h=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def random_table(rs, D=2, C=3, I=4, p_present=1.0):
    mask = rs.random((D, C)) < p_present
    return PrototypeTable(rs.standard_normal((D, C, I)), mask)


@pytest.fixture
def rs():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
    for note in ACCEPTANCE_NOTES:
        terminalreporter.write_line(f"note: {note}")
