import pytest

# (criterion number, title, passed, detail) collected by the acceptance suite
CRITERIA: list[tuple[int, str, bool, str]] = []


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA.append((number, title, passed, detail))
    print(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{number}] {title}: {detail}")
