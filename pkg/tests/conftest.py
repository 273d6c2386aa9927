import numpy as np
import pytest

from perpetuity.density import invariant_density
from perpetuity.model import cir_model, ou_model


@pytest.fixture(scope="session")
def ou_z():
    """OU factor with gamma=2, unit rate and f(z)=z."""
    return ou_model(2.0, a=1.0, f={"linear": [1.0]}, signed_cashflow=True)


@pytest.fixture(scope="session")
def ou_z_density(ou_z):
    return invariant_density(ou_z)


@pytest.fixture(scope="session")
def cir():
    return cir_model(1.0, 1.0, 0.5)


@pytest.fixture(scope="session")
def cir_density(cir):
    return invariant_density(cir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record and print one acceptance verdict line."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(label, ok, detail=""):
        line = f"[{label}] {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
