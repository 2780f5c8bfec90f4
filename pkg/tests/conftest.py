import numpy as np
import pytest

from gazestab.kinematics import canonical_chain


@pytest.fixture(scope="session")
def chain():
    return canonical_chain()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_q(chain, rng):
    """Joint angles inside the limits (base joints within +-pi/2)."""
    lo = np.maximum(chain.lower, -np.pi / 2)
    hi = np.minimum(chain.upper, np.pi / 2)
    return rng.uniform(lo, hi)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; call as ``criterion("A1 name", ok, detail)``."""

    def record(name, ok, detail=""):
        ACCEPTANCE[name] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
