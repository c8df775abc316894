import pytest
from dataclasses import replace

from starkecho.model import (
    NOMINAL_PEAK_OPTICAL_DEPTH,
    SimGrid,
    SpectralFeature,
    StarkGradient,
    build_medium,
    calibrate_coupling,
    coupling_for_depth,
    with_gradient,
)


@pytest.fixture(scope="session")
def calibrated_off():
    """Default grid, 25 kHz top hat, 40 % peak absorption, gradient off."""
    medium = build_medium(SimGrid(), SpectralFeature(), StarkGradient(voltage=0.0))
    return calibrate_coupling(medium, NOMINAL_PEAK_OPTICAL_DEPTH)


@pytest.fixture(scope="session")
def calibrated_on(calibrated_off):
    """Same sample with 25 V on the electrodes."""
    return with_gradient(calibrated_off, voltage=25.0, polarity=1)


@pytest.fixture(scope="session")
def thin_off():
    medium = build_medium(SimGrid(), SpectralFeature(), StarkGradient(voltage=0.0))
    return replace(medium, coupling=coupling_for_depth(medium, 0.01))


def small_medium(n_z=8, n_detune=16, t_step=0.02, voltage=5.0, coupling=0.1, **feature):
    grid = SimGrid(n_z=n_z, n_detune=n_detune, t_step=t_step)
    medium = build_medium(grid, SpectralFeature(**feature), StarkGradient(voltage=voltage))
    return replace(medium, coupling=coupling)


def pytest_configure(config):
    config.acceptance_results = []


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line for an acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        request.config.acceptance_results.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
