import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


class _Lazy(dict):
    """Builds each k on first access and keeps it for the whole session."""

    def __init__(self, build):
        super().__init__()
        self._build = build

    def __missing__(self, k):
        self[k] = self._build(k)
        return self[k]


@pytest.fixture(scope="session")
def ltf_built():
    from sqhard.matcher import construct_ltf_detailed
    return _Lazy(construct_ltf_detailed)


@pytest.fixture(scope="session")
def relu_built():
    from sqhard.relu import construct_relu_detailed
    return _Lazy(construct_relu_detailed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
