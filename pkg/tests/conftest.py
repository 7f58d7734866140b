import pytest

from seqmatch.seq_mdp import Vocab


@pytest.fixture
def ab():
    return Vocab(("a", "b"))


@pytest.fixture
def xonly():
    return Vocab(("x",))


# acceptance checks append one PASS/FAIL line each; shown at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
