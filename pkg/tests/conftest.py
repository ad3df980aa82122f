"""Shared pytest hooks.

The acceptance suite (test_acceptance.py) collects one verdict line per
criterion; echoing them in the terminal summary makes them visible in
default runs, where passing tests' stdout is captured and hidden.
"""
import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICT_LINES", None) if module else None
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
