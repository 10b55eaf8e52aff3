"""Collects acceptance verdicts and prints them after the run."""

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE.append((number, name, ok, line))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
