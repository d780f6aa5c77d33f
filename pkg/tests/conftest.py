import pytest

from palseg.geometry import PalCalibration
from palseg.model import ModelConfig, build_model

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def calib():
    return PalCalibration(center_x=400.3, center_y=300.7, r_inner=80.0, r_outer=250.0)


@pytest.fixture
def tiny_model():
    return build_model(ModelConfig.tiny(), rng_seed=0)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(name: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
