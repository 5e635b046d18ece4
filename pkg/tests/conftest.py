import pytest

# (criterion number, title, passed, detail) collected by tests/test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance outcome; the summary prints at the end of the session."""

    def record(num: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((num, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num}: {title}" + (f" ({detail})" if detail else ""))
