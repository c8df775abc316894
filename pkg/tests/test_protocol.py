import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from starkecho.errors import NoEchoFound, ScheduleError, TauTooSmall
from starkecho.model import (
    PulseSpec,
    SimGrid,
    SpectralFeature,
    StarkGradient,
    build_medium,
    coupling_for_depth,
    with_gradient,
)
from starkecho.protocol import (
    End,
    FlipPolarity,
    InjectPulse,
    PhaseMatchAndReverse,
    ProtocolSchedule,
    SetGradient,
    echo_metrics,
    echo_schedule,
    overlap_fidelity,
    run_backward_crib,
    run_fid,
    run_forward_echo,
    run_schedule,
    schedule_from_text,
    schedule_to_text,
    time_bandwidth_product,
)
from starkecho.transport import FieldTrace

PULSE = PulseSpec(duration=1.0, area=0.01)


def crib_medium(depth, n_z=200, t_step=0.02, half_khz=2000.0):
    """Zero-width intrinsic line spread over 2*half_khz by the gradient."""
    grid = SimGrid(n_z=n_z, n_detune=1, t_step=t_step)
    m = build_medium(grid, SpectralFeature(shape="gaussian", width=5.0),
                     StarkGradient(voltage=half_khz / 42.0))
    return replace(m, coupling=coupling_for_depth(m, depth))


def first_local_min(trace, t0, t1):
    t, o = trace.window(t0, t1)
    a = np.abs(o)
    k = np.nonzero((a[1:-1] < a[:-2]) & (a[1:-1] < a[2:]))[0][0] + 1
    return t[k]


# schedule validation -------------------------------------------------------

def test_schedule_must_be_ordered():
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(FlipPolarity(5.0), InjectPulse(1.0, PULSE), End(10.0)))
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(1.0, PULSE), FlipPolarity(1.0), End(10.0)))


def test_schedule_needs_single_final_end():
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(1.0, PULSE),))
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(1.0, PULSE), End(5.0), End(6.0)))
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=())


def test_single_phase_match():
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(1.0, PULSE), PhaseMatchAndReverse(4.0),
                                 PhaseMatchAndReverse(6.0), End(10.0)))


def test_pulse_time_consistency():
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(2.0, PULSE), End(10.0)))
    with pytest.raises(ScheduleError):
        ProtocolSchedule(events=(InjectPulse(1.0, PULSE), End(1.5)))


def test_flip_requires_gradient(thin_off):
    sched = ProtocolSchedule(events=(InjectPulse(1.0, PULSE), FlipPolarity(5.0), End(10.0)))
    with pytest.raises(ScheduleError):
        run_schedule(thin_off, sched)
    on = ProtocolSchedule(events=(SetGradient(0.5, 10.0, 1), InjectPulse(1.0, PULSE),
                                  FlipPolarity(5.0), End(10.0)))
    res = run_schedule(thin_off, on)
    assert res.medium.gradient.polarity == -1 and res.medium.gradient.voltage == 10.0


def test_tau_too_small(calibrated_on):
    with pytest.raises(TauTooSmall):
        run_forward_echo(calibrated_on, PULSE, 0.2)


def test_mode_names():
    s = ProtocolSchedule(events=(InjectPulse(1.0, PULSE), End(3.0)), mode="full-bloch")
    assert s.mode == "full_bloch"


def test_schedule_text_round_trip():
    sched = ProtocolSchedule(events=(
        SetGradient(0.0, 25.0, 1),
        InjectPulse(1.0, PulseSpec(shape="ramp", duration=2.0, area=0.02, carrier_detuning=3.5)),
        FlipPolarity(6.0, ramp=0.25),
        PhaseMatchAndReverse(9.0, flip=False),
        End(20.0),
    ), mode="full_bloch")
    again = schedule_from_text(schedule_to_text(sched))
    assert again == sched


def test_schedule_text_rejects_unknown_kind():
    text = "[schedule]\nmode = linearized\n\n[event.000]\nkind = teleport\ntime = 1.0\n"
    with pytest.raises(ScheduleError):
        schedule_from_text(text)


# FID ------------------------------------------------------------------------

def test_fid_shortened_by_gradient(thin_off):
    short = PulseSpec(duration=0.2, area=0.01)
    off = first_local_min(run_fid(thin_off, short, record_until=60.0), short.t_end + 0.05, 60.0)
    on_medium = with_gradient(thin_off, voltage=4.5)
    on = first_local_min(run_fid(on_medium, short, record_until=10.0), short.t_end + 0.05, 10.0)
    ratio = (off - short.t_ref) / (on - short.t_ref)
    expected = (2 * 42 * 4.5 + 25) / 25
    assert ratio == pytest.approx(expected, rel=0.15)


def test_single_line_rings_without_decay():
    grid = SimGrid(n_z=20, n_detune=1, t_step=0.02)
    m = build_medium(grid, SpectralFeature(center=10.0), StarkGradient())
    m = replace(m, coupling=1e-6)
    tr = run_fid(m, PULSE, record_until=200.0)
    t, o = tr.window(PULSE.t_end + 0.1, 200.0)
    mag = np.abs(o)
    assert np.max(mag) / np.min(mag) - 1 < 1e-4
    phase = np.unwrap(np.angle(o))
    rate = np.polyfit(t, phase, 1)[0]
    assert rate == pytest.approx(-10.0 * 2 * math.pi * 1e-3, rel=1e-4)


# forward echo ---------------------------------------------------------------

def test_echo_at_twice_tau(calibrated_on):
    trace, m = run_forward_echo(calibrated_on, PULSE, 10.0)
    assert abs(m.peak_time_us - (PULSE.t_ref + 20.0)) <= calibrated_on.grid.t_step + 1e-9
    assert 0 < m.efficiency < 1e-3


def test_no_gradient_no_echo(calibrated_off):
    with pytest.warns(UserWarning):
        trace, _ = run_forward_echo(calibrated_off, PULSE, 10.0)
    fid = run_fid(calibrated_off, PULSE, record_until=trace.times[-1])
    assert np.array_equal(trace.boundary_out, fid.boundary_out)


def test_echo_energy_quadratic_in_amplitude(calibrated_on):
    _, a = run_forward_echo(calibrated_on, PULSE, 5.0)
    _, b = run_forward_echo(calibrated_on, PULSE.with_area(0.03), 5.0)
    assert b.echo_energy / a.echo_energy == pytest.approx(9.0, rel=1e-12)


def test_finite_ramp_delays_echo(calibrated_on):
    sched = echo_schedule(PULSE, 6.0, 24.0, switch_ramp=0.5)
    trace = run_schedule(calibrated_on, sched).forward
    m = echo_metrics(trace, PULSE, PULSE.t_ref + 12.5)
    assert abs(m.peak_time_us - (PULSE.t_ref + 12.5)) <= 2 * calibrated_on.grid.t_step + 1e-9


def test_echo_metrics_json_fields(calibrated_on):
    _, m = run_forward_echo(calibrated_on, PULSE, 5.0)
    d = json.loads(m.to_json())
    assert list(d) == ["peak_time_us", "echo_energy", "efficiency", "fidelity", "tbp"]
    assert d["tbp"] is None


# metrics ---------------------------------------------------------------------

def test_perfect_reversal_metrics():
    pulse = PulseSpec(shape="ramp", duration=2.0, area=0.1, start_time=1.0)
    dt = 0.01
    t = np.arange(0, 20.0 + dt / 2, dt)
    t_flip = pulse.t_ref + 4.0
    echo = pulse.sample(2 * t_flip - t, dt)
    tr = FieldTrace(times=t, boundary_in=pulse.sample(t, dt), boundary_out=echo,
                    direction="backward", sample_step=dt)
    m = echo_metrics(tr, pulse, pulse.t_ref + 8.0)
    assert m.fidelity == pytest.approx(1.0, abs=1e-12)
    assert m.efficiency == pytest.approx(1.0, rel=1e-9)
    assert m.peak_time_us == pytest.approx(t[np.argmax(np.abs(echo))])


def test_no_echo_below_noise_floor():
    t = np.arange(0, 20, 0.02)
    tr = FieldTrace(times=t, boundary_in=0 * t, boundary_out=1e-9 * np.ones_like(t),
                    direction="forward", sample_step=0.02)
    with pytest.raises(NoEchoFound):
        echo_metrics(tr, PULSE, 11.5, noise_floor=1e-6)


def test_metrics_need_recorded_window():
    t = np.arange(0, 10, 0.02)
    tr = FieldTrace(times=t, boundary_in=0 * t, boundary_out=np.ones_like(t),
                    direction="forward", sample_step=0.02)
    with pytest.raises(ValueError):
        echo_metrics(tr, PULSE, 9.0)


def test_tbp_on_sinc_envelope():
    w = 0.025  # MHz
    delays = np.arange(2.0, 41.0, 1.0)
    inten = np.sinc(w * delays) ** 2
    exact = brentq(lambda T: np.sinc(w * T) ** 2 - math.exp(-2), 1.0, 39.0)
    tbp, window, i0 = time_bandwidth_product(delays, inten, 1.0)
    assert i0 == pytest.approx(1.0, rel=1e-3)
    assert window == pytest.approx(exact, rel=0.01)
    assert tbp == pytest.approx(window)


def test_tbp_warns_without_crossing():
    with pytest.warns(UserWarning):
        tbp, window, _ = time_bandwidth_product([1, 2, 3], [1.0, 0.99, 0.98], 1.0)
    assert window == 3


# backward retrieval ------------------------------------------------------------

def test_thin_backward_is_time_reversed():
    pulse = PulseSpec(shape="ramp", duration=2.0, area=0.01)
    trace, m = run_backward_crib(crib_medium(0.1), pulse, 3.0)
    assert m.fidelity > 0.99
    assert m.efficiency == pytest.approx((1 - math.exp(-0.1)) ** 2, rel=0.02)
    # output lives on the backward trace only after the reversal
    assert np.all(trace.boundary_out[trace.times < pulse.t_ref + 3.0 - 1e-9] == 0)


def test_ramp_comes_back_mirrored():
    pulse = PulseSpec(shape="ramp", duration=2.0, area=0.01)
    tau = 3.0
    trace, _ = run_backward_crib(crib_medium(0.5), pulse, tau)
    dt = trace.sample_step
    t_flip = pulse.t_ref + tau
    mirror = np.abs(pulse.sample(2 * t_flip - trace.times, dt))
    out = np.abs(trace.boundary_out)
    lags = np.arange(-50, 51)
    xc = [np.dot(np.roll(mirror, k), out) for k in lags]
    assert lags[int(np.argmax(xc))] == 0
    straight = np.abs(pulse.sample(trace.times - 2 * tau, dt))
    assert overlap_fidelity(out, mirror) > 0.99
    assert overlap_fidelity(out, straight) < 0.95


def test_backward_efficiency_monotone_in_depth():
    pulse = PulseSpec(shape="ramp", duration=2.0, area=0.01)
    eff = [run_backward_crib(crib_medium(d), pulse, 3.0)[1].efficiency for d in (0.5, 1.0, 2.0, 4.0)]
    for a, b in zip(eff, eff[1:]):
        assert b >= a * 0.99
    assert eff[-1] > eff[0]
