"""Timed experiment schedules: FID, forward Stark echo and backward retrieval.

A schedule is a time-ordered list of events executed on one simulation
state. The gradient setting is turned into a per-step Stark profile; a
``PhaseMatchAndReverse`` event splits the run into a forward and a backward
transport segment.
"""
from __future__ import annotations

import configparser
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.integrate import trapezoid

from .dynamics import EnsembleState, normalize_mode, phase_match
from .errors import NoEchoFound, ScheduleError, TauTooSmall
from .model import KHZ, MediumSpec, PulseSpec
from .transport import FieldTrace, ScheduleSlice, run_transport

ONE_OVER_E2 = math.exp(-2.0)


@dataclass(frozen=True)
class InjectPulse:
    time: float
    pulse: PulseSpec
    kind = "inject_pulse"


@dataclass(frozen=True)
class SetGradient:
    time: float
    voltage: float
    polarity: int
    kind = "set_gradient"


@dataclass(frozen=True)
class FlipPolarity:
    """Reverse the gradient; ``ramp`` (us) > 0 sweeps it linearly instead."""

    time: float
    ramp: float = 0.0
    kind = "flip_polarity"


@dataclass(frozen=True)
class PhaseMatchAndReverse:
    """Apply the phase-matching operation and switch to backward emission.
    With ``flip`` the detunings are reversed at the same instant."""

    time: float
    flip: bool = True
    kind = "phase_match_and_reverse"


@dataclass(frozen=True)
class End:
    time: float
    kind = "end"


EVENT_TYPES = {cls.kind: cls for cls in (InjectPulse, SetGradient, FlipPolarity, PhaseMatchAndReverse, End)}


@dataclass(frozen=True)
class ProtocolSchedule:
    events: tuple
    mode: str = "linearized"

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        ev = self.events
        if not ev:
            raise ScheduleError("schedule has no events")
        times = [e.time for e in ev]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScheduleError("events must be strictly time-ordered")
        if times[0] < 0:
            raise ScheduleError("event times must be >= 0")
        ends = [e for e in ev if isinstance(e, End)]
        if len(ends) != 1 or not isinstance(ev[-1], End):
            raise ScheduleError("schedule needs exactly one end event, placed last")
        if sum(isinstance(e, PhaseMatchAndReverse) for e in ev) > 1:
            raise ScheduleError("phase_match_and_reverse may appear at most once")
        for e in ev:
            if isinstance(e, InjectPulse) and abs(e.pulse.start_time - e.time) > 1e-9:
                raise ScheduleError(f"pulse at t={e.time} has start_time {e.pulse.start_time}")
            if isinstance(e, InjectPulse) and e.pulse.t_end > ev[-1].time:
                raise ScheduleError("pulse extends past the end of the record")

    @property
    def record_until(self) -> float:
        return self.events[-1].time

    @property
    def reversal(self):
        for e in self.events:
            if isinstance(e, PhaseMatchAndReverse):
                return e
        return None

    def check_gradient(self, medium: MediumSpec) -> None:
        """Flips are only meaningful while a gradient is applied."""
        on = medium.gradient.is_on
        for e in self.events:
            if isinstance(e, SetGradient):
                on = e.voltage != 0 and e.polarity != 0 and medium.gradient.broadening_rate != 0
            elif isinstance(e, FlipPolarity) and not on:
                raise ScheduleError(f"flip_polarity at t={e.time} while the gradient is off")

    def gradient_changes(self, medium: MediumSpec):
        """``(time, before, after, ramp)`` for every change of the signed
        Stark half width (rad/us)."""
        rate = medium.gradient.broadening_rate * KHZ
        level = medium.gradient.signed_half_width
        changes = []
        for e in self.events:
            if isinstance(e, SetGradient):
                new = e.polarity * e.voltage * rate
                changes.append((e.time, level, new, 0.0))
                level = new
            elif isinstance(e, FlipPolarity) or (isinstance(e, PhaseMatchAndReverse) and e.flip):
                ramp = getattr(e, "ramp", 0.0)
                changes.append((e.time, level, -level, ramp))
                level = -level
        return changes

    def stark_at(self, medium: MediumSpec, t):
        """Signed Stark half width (rad/us) at times ``t``."""
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, medium.gradient.signed_half_width)
        for t0, before, after, ramp in self.gradient_changes(medium):
            if ramp > 0:
                val = before + (after - before) * np.clip((t - t0) / ramp, 0.0, 1.0)
            else:
                val = after
            out = np.where(t >= t0, val, out)
        return out

    def stark_profile(self, medium: MediumSpec, n_steps: int, dt: float) -> np.ndarray:
        """Signed Stark half width at every step midpoint."""
        return self.stark_at(medium, (np.arange(n_steps) + 0.5) * dt)

    def final_gradient(self, medium: MediumSpec):
        g = medium.gradient
        for e in self.events:
            if isinstance(e, SetGradient):
                g = replace(g, voltage=e.voltage, polarity=e.polarity)
            elif isinstance(e, FlipPolarity) or (isinstance(e, PhaseMatchAndReverse) and e.flip):
                if g.is_on:
                    g = g.flipped()
        return g


@dataclass
class RunResult:
    forward: FieldTrace
    backward: FieldTrace | None
    state: EnsembleState
    medium: MediumSpec


def run_schedule(medium: MediumSpec, schedule: ProtocolSchedule, snapshot_times=None) -> RunResult:
    """Execute ``schedule`` from a ground-state ensemble at t = 0.

    Event times are snapped to the nearest time-grid node. Both returned
    traces cover the whole record; the forward trace is zero after a
    reversal and the backward trace zero before it.
    """
    schedule.check_gradient(medium)
    dt = medium.grid.t_step
    n_total = int(math.ceil(schedule.record_until / dt - 1e-9))
    times = np.arange(n_total + 1) * dt
    stark = schedule.stark_profile(medium, n_total, dt)

    rev = schedule.reversal
    n_rev = n_total if rev is None else int(round(rev.time / dt))
    drive_f = np.zeros(n_total + 1, dtype=complex)
    drive_b = np.zeros(n_total + 1, dtype=complex)
    for e in schedule.events:
        if isinstance(e, InjectPulse):
            samples = e.pulse.sample(times, dt)
            if rev is not None and e.time >= rev.time:
                drive_b += samples
            else:
                drive_f += samples

    state = EnsembleState.ground(medium, schedule.mode)
    state, tr_f = run_transport(medium, state, ScheduleSlice(drive_f[: n_rev + 1], stark[:n_rev]),
                                "forward", snapshot_times=snapshot_times)
    forward = _padded(tr_f, times, drive_f)
    backward = None
    if rev is not None:
        state = phase_match(state)
        state, tr_b = run_transport(medium, state, ScheduleSlice(drive_b[n_rev:], stark[n_rev:]),
                                    "backward", snapshot_times=snapshot_times)
        backward = _padded(tr_b, times, drive_b)
        backward.boundary_in = drive_f + drive_b
    final_medium = replace(medium, gradient=schedule.final_gradient(medium))
    state.polarity_sign = final_medium.gradient.polarity
    return RunResult(forward=forward, backward=backward, state=state, medium=final_medium)


def _padded(trace: FieldTrace, times, drive) -> FieldTrace:
    out = np.zeros(len(times), dtype=complex)
    k0 = int(round((trace.times[0] - times[0]) / trace.sample_step))
    out[k0: k0 + len(trace.boundary_out)] = trace.boundary_out
    return FieldTrace(times=times, boundary_in=drive, boundary_out=out, direction=trace.direction,
                      sample_step=trace.sample_step, snapshot_times=trace.snapshot_times,
                      snapshots=trace.snapshots, z=trace.z)


@dataclass
class EchoMetrics:
    peak_time_us: float
    echo_energy: float
    efficiency: float
    fidelity: float
    tbp: float | None = None

    def to_dict(self) -> dict:
        return {
            "peak_time_us": self.peak_time_us,
            "echo_energy": self.echo_energy,
            "efficiency": self.efficiency,
            "fidelity": self.fidelity,
            "tbp": self.tbp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, indent=2) + "\n"


def echo_window(pulse: PulseSpec, expected_echo_time: float):
    return expected_echo_time - 3 * pulse.duration, expected_echo_time + 3 * pulse.duration


def echo_metrics(trace: FieldTrace, input: PulseSpec, expected_echo_time: float,
                 noise_floor: float = 0.0, envelope=None) -> EchoMetrics:
    """Quantify the echo inside ``expected +/- 3 duration``.

    ``fidelity`` is the normalised squared overlap of the output with the
    input reflected about the rephasing instant. ``envelope`` is an optional
    ``(total_delays, echo_intensities)`` pair from a delay sweep, used for
    the time-bandwidth product.
    """
    t0, t1 = echo_window(input, expected_echo_time)
    if t1 > trace.times[-1] + 1e-9:
        raise ValueError(f"trace ends at {trace.times[-1]} us, before the echo window closes at {t1}")
    t, out = trace.window(t0, t1)
    mag = np.abs(out)
    if mag.size == 0 or mag.max() <= noise_floor:
        raise NoEchoFound(f"no signal above {noise_floor} in [{t0}, {t1}] us")
    dt = trace.sample_step
    peak_time = float(t[int(np.argmax(mag))])
    echo_energy = float(trapezoid(mag**2, dx=dt))
    input_energy = float(trapezoid(np.abs(input.sample(trace.times, dt)) ** 2, dx=dt))
    flip_time = 0.5 * (expected_echo_time + input.t_ref)
    reflected = input.sample(2 * flip_time - t, dt)
    fidelity = overlap_fidelity(out, reflected)
    tbp = None
    if envelope is not None:
        tbp = time_bandwidth_product(envelope[0], envelope[1], input.duration)[0]
    return EchoMetrics(peak_time_us=peak_time, echo_energy=echo_energy,
                       efficiency=echo_energy / input_energy, fidelity=fidelity, tbp=tbp)


def overlap_fidelity(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    na = np.vdot(a, a).real
    nb = np.vdot(b, b).real
    if na == 0 or nb == 0:
        return 0.0
    return float(abs(np.vdot(b, a)) ** 2 / (na * nb))


def time_bandwidth_product(total_delays, intensities, duration: float, threshold: float = ONE_OVER_E2):
    """Storage window over pulse duration.

    The window is the total delay at which echo intensity first falls below
    ``threshold`` times its zero-delay value; that value is extrapolated by
    fitting ``a + b T^2`` to the three shortest delays. Returns
    ``(tbp, window, zero_delay_intensity)``; if the sweep never crosses the
    threshold the last delay is used and a warning issued.
    """
    T = np.asarray(total_delays, dtype=float)
    I = np.asarray(intensities, dtype=float)
    order = np.argsort(T)
    T, I = T[order], I[order]
    k = min(3, len(T))
    if k >= 2:
        coeff = np.linalg.lstsq(np.column_stack([np.ones(k), T[:k] ** 2]), I[:k], rcond=None)[0]
        i0 = float(coeff[0])
    else:
        i0 = float(I[0])
    level = threshold * i0
    below = np.nonzero(I < level)[0]
    if below.size == 0:
        warnings.warn("echo intensity never fell below the threshold; window is a lower bound")
        window = float(T[-1])
    else:
        j = int(below[0])
        if j == 0:
            window = float(T[0])
        else:
            # linear interpolation between the bracketing delays
            window = float(T[j - 1] + (I[j - 1] - level) * (T[j] - T[j - 1]) / (I[j - 1] - I[j]))
    return window / duration, window, i0


def _default_record(pulse: PulseSpec, expected: float) -> float:
    return expected + 3 * pulse.duration + pulse.duration


def fid_schedule(pulse: PulseSpec, record_until: float, mode="linearized") -> ProtocolSchedule:
    return ProtocolSchedule(events=(InjectPulse(pulse.start_time, pulse), End(record_until)), mode=mode)


def run_fid(medium: MediumSpec, pulse: PulseSpec, mode: str = "linearized",
            record_until: float | None = None) -> FieldTrace:
    """Field transmitted through the sample after a single pulse."""
    if record_until is None:
        record_until = pulse.t_end + 80.0
    return run_schedule(medium, fid_schedule(pulse, record_until, mode)).forward


def echo_schedule(pulse: PulseSpec, tau: float, record_until: float, mode="linearized",
                  backward=False, switch_ramp=0.0, flip=True) -> ProtocolSchedule:
    flip_time = pulse.t_ref + tau
    if flip_time < pulse.t_end - 1e-9:
        raise TauTooSmall(f"tau={tau} us flips the gradient before the pulse ends")
    events = [InjectPulse(pulse.start_time, pulse)]
    if backward:
        events.append(PhaseMatchAndReverse(flip_time, flip=flip))
    elif flip:
        events.append(FlipPolarity(flip_time, ramp=switch_ramp))
    events.append(End(record_until))
    return ProtocolSchedule(events=tuple(events), mode=mode)


def run_forward_echo(medium: MediumSpec, pulse: PulseSpec, tau: float, mode: str = "linearized",
                     record_until: float | None = None, switch_ramp: float = 0.0,
                     envelope=None, noise_floor: float = 0.0):
    """Stark echo in the transmitted direction: flip the gradient ``tau``
    after the pulse centre, expect the echo ``2 tau`` after it."""
    expected = pulse.t_ref + 2 * tau
    if record_until is None:
        record_until = _default_record(pulse, expected)
    flip = medium.gradient.is_on
    if not flip:
        warnings.warn("gradient is off: nothing to reverse, no echo will form")
    sched = echo_schedule(pulse, tau, record_until, mode, switch_ramp=switch_ramp, flip=flip)
    trace = run_schedule(medium, sched).forward
    return trace, echo_metrics(trace, pulse, expected, noise_floor=noise_floor, envelope=envelope)


def run_backward_crib(medium: MediumSpec, pulse: PulseSpec, tau: float, mode: str = "linearized",
                      record_until: float | None = None, noise_floor: float = 0.0):
    """Full memory protocol: store, then flip the detunings and phase-match
    at ``t_ref + tau``; the time-reversed pulse leaves through the input face."""
    expected = pulse.t_ref + 2 * tau
    if record_until is None:
        record_until = _default_record(pulse, expected)
    if not medium.gradient.is_on:
        warnings.warn("gradient is off: the backward field will not rephase")
    sched = echo_schedule(pulse, tau, record_until, mode, backward=True, flip=medium.gradient.is_on)
    trace = run_schedule(medium, sched).backward
    return trace, echo_metrics(trace, pulse, expected, noise_floor=noise_floor)


# serialisation -------------------------------------------------------------

def schedule_to_text(schedule: ProtocolSchedule) -> str:
    cp = configparser.ConfigParser()
    cp["schedule"] = {"mode": schedule.mode, "record_until": repr(schedule.record_until)}
    for i, e in enumerate(schedule.events):
        sec = {"kind": e.kind, "time": repr(float(e.time))}
        if isinstance(e, InjectPulse):
            for k, v in asdict(e.pulse).items():
                sec[f"pulse.{k}"] = v if isinstance(v, str) else repr(float(v))
        elif isinstance(e, SetGradient):
            sec["voltage"] = repr(float(e.voltage))
            sec["polarity"] = str(int(e.polarity))
        elif isinstance(e, FlipPolarity):
            sec["ramp"] = repr(float(e.ramp))
        elif isinstance(e, PhaseMatchAndReverse):
            sec["flip"] = "true" if e.flip else "false"
        cp[f"event.{i:03d}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def schedule_from_text(text: str) -> ProtocolSchedule:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "schedule" not in cp:
        raise ScheduleError("missing [schedule] section")
    events = []
    for name in sorted(s for s in cp.sections() if s.startswith("event.")):
        sec = cp[name]
        kind = sec.get("kind")
        if kind not in EVENT_TYPES:
            raise ScheduleError(f"[{name}] unknown event kind {kind!r}")
        t = float(sec["time"])
        if kind == "inject_pulse":
            fields = {k[len("pulse."):]: v for k, v in sec.items() if k.startswith("pulse.")}
            pulse = PulseSpec(
                shape=fields.get("shape", "square"),
                **{k: float(v) for k, v in fields.items() if k != "shape"},
            )
            events.append(InjectPulse(t, pulse))
        elif kind == "set_gradient":
            events.append(SetGradient(t, float(sec["voltage"]), int(sec["polarity"])))
        elif kind == "flip_polarity":
            events.append(FlipPolarity(t, float(sec.get("ramp", "0"))))
        elif kind == "phase_match_and_reverse":
            events.append(PhaseMatchAndReverse(t, sec.getboolean("flip", True)))
        else:
            events.append(End(t))
    sched = ProtocolSchedule(events=tuple(events), mode=cp["schedule"].get("mode", "linearized"))
    rec = cp["schedule"].get("record_until")
    if rec is not None and abs(float(rec) - sched.record_until) > 1e-9:
        raise ScheduleError("record_until disagrees with the end event")
    return sched
