import pytest

_VERDICTS = []


class Verdicts:
    """Collects one line per acceptance criterion for the terminal summary."""

    def record(self, criterion, ok, detail=""):
        status = "PASS" if ok is True else "FAIL" if ok is False else ok
        line = f"[{status}] criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
