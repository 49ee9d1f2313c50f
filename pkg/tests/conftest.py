import os

import pytest

from kvtrace.trace import parse_trace

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "kvtrace", "data")


def data_path(name: str) -> str:
    return os.path.abspath(os.path.join(DATA, name))


@pytest.fixture(scope="session")
def sample_path():
    return data_path("sample_trace.csv")


@pytest.fixture(scope="session")
def sample_records(sample_path):
    return parse_trace(sample_path)


# Acceptance results, filled by tests/test_acceptance.py and printed once
# at the end of the session so they land in the normal pytest output.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title} ({detail})")
