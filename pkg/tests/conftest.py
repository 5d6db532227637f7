import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        ok, detail = acceptance.RESULTS[n]
        terminalreporter.write_line(f"C{n:<3}{'PASS' if ok else 'FAIL'}  {detail}")
