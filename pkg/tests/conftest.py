import numpy as np
import pytest

from voxcut.scenes import DEFAULT_PARTS, SHELL_COLOR
from voxcut.voxel import AttributedVoxelGrid

PART_TABLE = {1: SHELL_COLOR, **{pid: color for pid, (_, color) in DEFAULT_PARTS.items()}}


def random_grid(rng: np.random.Generator, K: int = 8, p_empty: float = 0.3) -> AttributedVoxelGrid:
    ids = rng.integers(1, 5, size=(K, K, K)).astype(np.uint8)
    ids[rng.random((K, K, K)) < p_empty] = 0
    return AttributedVoxelGrid.from_part_ids(ids, PART_TABLE)


@pytest.fixture
def part_table():
    return dict(PART_TABLE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance criterion reporting ------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, name = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _criteria[number] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        name, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {name}: {status}")
