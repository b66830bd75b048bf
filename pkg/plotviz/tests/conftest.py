import subprocess
import sys

import pytest

_criteria: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Default run directories produced through the simulator CLI."""
    base = tmp_path_factory.mktemp("runs")
    dirs = {}
    for name in ("EXP1", "EXP2", "EXP3"):
        out = base / name
        subprocess.run(
            [sys.executable, "-m", "bohmsim", "run", name, "--n", "50",
             "--out", str(out)],
            check=True,
            capture_output=True,
        )
        dirs[name] = out
    return dirs


@pytest.fixture(scope="session")
def criterion():
    def log(num: int, desc: str, ok: bool, detail: str = "") -> bool:
        _criteria.append((num, desc, bool(ok), detail))
        return bool(ok)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria (secondary)")
    for num, desc, ok, detail in sorted(_criteria):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {desc}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
