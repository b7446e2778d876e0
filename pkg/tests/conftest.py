import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_acceptance = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        _acceptance.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _acceptance:
        name = rep.nodeid.split("::")[-1]
        detail = "".join(text for title, text in rep.sections if "stdout" in title).strip()
        verdict = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  [{detail.splitlines()[-1]}]" if detail else ""))
