import numpy as np
import pytest

_LINES = []


class Verdicts:
    """Collects one line per acceptance criterion for the terminal summary."""

    def record(self, tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
