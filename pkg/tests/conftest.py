"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE[criterion] = f"criterion {criterion} [{status}] {title}" + (f": {detail}" if detail else "")
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
