import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, with recorded detail."""
    outcomes = {}
    for kind in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(kind, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid \
                    and getattr(rep, "when", "call") == "call":
                num = nodeid.split("test_criterion_")[1][:2]
                outcomes[num] = kind == "passed"
    if not outcomes:
        return
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", {}) if mod else {}
    terminalreporter.section("acceptance criteria")
    for num in sorted(outcomes):
        status = "PASS" if outcomes[num] else "FAIL"
        desc, lines = results.get(num, ("(no detail recorded)", []))
        terminalreporter.write_line(f"criterion {num} {status}  {desc}")
        for line in lines:
            terminalreporter.write_line(f"    {line}")
