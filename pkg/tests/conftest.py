import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


class CriterionRecorder:
    def check(self, number: int, name: str, ok: bool, detail: str = "") -> None:
        """Record one acceptance criterion, then fail the test if it did not hold."""
        _RESULTS[number] = (name, bool(ok), detail)
        assert ok, f"criterion {number} ({name}) failed: {detail}"


@pytest.fixture(scope="session")
def criteria():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {name} ({detail})")
