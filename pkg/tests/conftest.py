"""Shared test configuration.

Caps the math-library thread pools before numpy/numba load anywhere so
latency comparisons are single-threaded, and appends a one-line verdict
per acceptance criterion to the terminal summary.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL"), ("skipped", "SKIPPED")):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" in nodeid:
                verdicts[nodeid.split("::")[-1]] = label
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for name in sorted(verdicts):
            terminalreporter.write_line(f"{name}: {verdicts[name]}")
