import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (number, name, passed, detail) recorded by the acceptance criteria
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num:>2}. {name}: {detail}")
