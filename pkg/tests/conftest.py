import pytest

# one (criterion, verdict, detail) entry per acceptance check, printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
