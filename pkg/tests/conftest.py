import pytest

from slenat.core import SleParams
from slenat.natparam import build_phi_grid

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def small_phi():
    """Coarse phi grid (200 paths per angle), enough for structural checks."""
    return build_phi_grid(SleParams(8 / 3), 200, 0)


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
