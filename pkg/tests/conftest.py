import sys


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acc.VERDICTS):
            terminalreporter.write_line(acc.VERDICTS[n])
