import pytest

_VERDICTS = []


class Verdicts:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, label: str, passed: bool, measured: str) -> bool:
        _VERDICTS.append((label, bool(passed), measured))
        print(f"{'PASS' if passed else 'FAIL'} {label}: {measured}")
        return bool(passed)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, measured in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {label}: {measured}")
