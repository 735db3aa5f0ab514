import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(n, title, ok, detail):
    ACCEPTANCE[n] = (bool(ok), title, detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} {title}: {detail}")
