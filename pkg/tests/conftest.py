import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

PATTERN_A_TEXT_D = np.repeat([4.0, 0.6, 0.5, 0.4, 0.2], 3)


@pytest.fixture
def fh_spec():
    from eblupboot import ModelSpec

    return ModelSpec.fay_herriot(np.ones((15, 1)), PATTERN_A_TEXT_D)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}
ACCEPTANCE_TABLES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for table in ACCEPTANCE_TABLES:
        terminalreporter.write(table + "\n")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
