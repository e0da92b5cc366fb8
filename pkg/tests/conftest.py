import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_text(path, text):
    path.write_text(text)
    return path


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_lines(request):
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
