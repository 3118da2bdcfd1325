import re

from _support import ACCEPTANCE_NOTES


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call" or (m and outcome == "error"):
                n = int(m.group(1))
                status = "PASS" if outcome == "passed" else "FAIL"
                note = ACCEPTANCE_NOTES.get(n, "")
                lines.append((n, f"criterion {n:2d} {status}  {m.group(2)}" + (f"  ({note})" if note else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
