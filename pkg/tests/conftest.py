import pytest

from hboxagent.belief import CalibrationParams, fit_calibration
from hboxagent.environment import GenSpec, generate_dataset
from hboxagent.kbcs import KbcsConfig, calibration_pairs

_CRITERIA: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    _CRITERIA.append((number, title, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {number:2d}. {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_spec():
    return GenSpec(width=16, height=16, roi_size=3, signal_amplitude=1.5, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec, 60)


@pytest.fixture(scope="session")
def fitted_kbcs(small_spec):
    calib = generate_dataset(small_spec, 200, start=10_000)
    pairs = calibration_pairs(calib, KbcsConfig(window=3))
    cals = {c: fit_calibration(p, c) for c, p in pairs.items()}
    return KbcsConfig(window=3, calibrations=cals)


@pytest.fixture
def identity_kbcs():
    return KbcsConfig(window=4, calibrations={"finding": CalibrationParams("finding")})
