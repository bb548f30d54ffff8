import numpy as np
import pytest

from epamnet.tensor import precision


@pytest.fixture
def double():
    with precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; all verdicts are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number: int, title: str, passed: bool, detail: str, seconds: float) -> None:
        line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'} - {detail} [{seconds:.1f}s]"
        lines.append((number, line))
        print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
