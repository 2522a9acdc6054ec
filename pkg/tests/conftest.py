import pytest

from fstcn.synthetic import generate_synthetic
from fstcn.video_io import load_dataset

from _helpers import TINY_DATA

_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """A 4-class synthetic dataset small enough to train in seconds."""
    return generate_synthetic(TINY_DATA, tmp_path_factory.mktemp("tiny_data"))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    return load_dataset(tiny_root)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
