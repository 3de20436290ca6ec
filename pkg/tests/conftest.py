import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines past output capture."""
    for name, mod in sys.modules.items():
        if name.endswith("test_acceptance"):
            lines = getattr(mod, "VERDICTS", [])
            if lines:
                terminalreporter.section("acceptance criteria")
                for line in sorted(lines):
                    terminalreporter.write_line(line)
            break
