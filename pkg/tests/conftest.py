import pytest

_LINES: list[str] = []


class CriterionReport:
    def record(self, number: int, title: str, passed: bool, detail: str) -> str:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        _LINES.append(line)
        print(line)
        return line


@pytest.fixture(scope="session")
def criteria():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
