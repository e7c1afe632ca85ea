import pytest

from fedblind.numcore import RsaKeyPair, Seed


@pytest.fixture
def toy_key():
    """p=5, q=7: N=35, lambda=12, e=d=5."""
    return RsaKeyPair(5, 7, 35, 5, 5, 12)


@pytest.fixture
def seed0():
    return Seed(bytes(32))


def seed(i: int) -> Seed:
    return Seed.from_int(i)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
