import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if match:
                rows.append((int(match.group(1)), match.group(2), label))
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number, name, label in sorted(rows):
        terminalreporter.write_line(f"criterion {number:2d} [{name}]: {label}")
