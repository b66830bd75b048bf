import pytest

_criteria: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """Record an acceptance-criterion verdict; one line each in the summary."""

    def log(num: int, desc: str, ok: bool, detail: str = "") -> bool:
        _criteria.append((num, desc, bool(ok), detail))
        return bool(ok)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, ok, detail in sorted(_criteria):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {desc}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
