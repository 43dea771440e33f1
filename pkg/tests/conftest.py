import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one-line acceptance verdicts; they are repeated in the terminal summary."""
    if not hasattr(request.config, "_verdicts"):
        request.config._verdicts = []
    return request.config._verdicts


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_verdicts", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
