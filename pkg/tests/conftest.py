import math

import numpy as np
import pytest

from qhoreduce.basis import enumerate_modes

GOLDEN_OMEGA = math.sqrt(5) - 1


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def basis41():
    return enumerate_modes(1, 41)


def random_block(basis, rng, hermitian=False, scale=1.0):
    A = rng.standard_normal((basis.size, basis.size)) + 1j * rng.standard_normal((basis.size, basis.size))
    if hermitian:
        A = 0.5 * (A + A.conj().T)
    return scale * A


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; unattainable criteria are xfailed with their measurement."""

    def record(n, title, ok, detail, unattainable=None):
        _VERDICTS[n] = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(_VERDICTS[n])
        if not ok and unattainable:
            pytest.xfail(unattainable)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
