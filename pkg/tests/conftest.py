import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cdpad.synthdata import SyntheticConfig, generate_dataset  # noqa: E402

SMALL_DATA = dict(identities={"train": 3, "dev": 2, "test": 2}, samples_per_identity=12)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(SyntheticConfig(**SMALL_DATA))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
