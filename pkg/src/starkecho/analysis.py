"""Independent oracles and parameter sweeps.

* ``analytic_absorption`` / ``analytic_coherence``: closed-form weak-pulse
  propagation through a spectrally uniform absorber.
* ``brute_force_echo``: a gridless discrete-atom model for thin samples,
  integrated with an adaptive ODE solver and summed to first order.
* ``run_sweep``: one echo experiment per swept value, collected into a table.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.stats import norm, qmc

from .errors import ConfigError, StarkEchoError, TooThick
from .model import (
    MediumSpec,
    PulseSpec,
    SimGrid,
    SpectralFeature,
    StarkGradient,
    build_medium,
    coupling_for_depth,
    with_gradient,
)
from .protocol import (
    InjectPulse,
    ProtocolSchedule,
    SetGradient,
    run_backward_crib,
    run_fid,
    run_forward_echo,
)
from .transport import FieldTrace, ScheduleSlice, run_transport
from .dynamics import EnsembleState

THIN_LIMIT = 0.2


# closed-form weak-pulse propagation -----------------------------------------

def analytic_absorption(eta, input_envelope, z, t, c=math.inf):
    """Field at ``(z, t)`` for a uniformly absorbing medium:
    ``exp(-eta z) * E(0, t - z/c)`` with ``eta`` the amplitude coefficient
    (per mm) and ``input_envelope`` a callable of time."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    retarded = t - z / c if math.isfinite(c) else t
    return np.exp(-eta * z) * np.asarray(input_envelope(retarded), dtype=complex)


def analytic_coherence(eta, input_envelope, delta, z, t, t_start=0.0):
    """Coherence driven by the attenuated field,
    ``(i/2) * exp(-eta z) * int_{t_start}^{t} exp(-i delta (t - s)) E(0, s) ds``.
    ``delta`` in rad/us."""

    def part(fn):
        return quad(fn, t_start, t, limit=400)[0]

    re = part(lambda s: (np.exp(-1j * delta * (t - s)) * complex(input_envelope(s))).real)
    im = part(lambda s: (np.exp(-1j * delta * (t - s)) * complex(input_envelope(s))).imag)
    return 0.5j * math.exp(-eta * z) * (re + 1j * im)


@dataclass
class OracleResult:
    probe_points: list
    analytic_field: np.ndarray
    simulated_field: np.ndarray
    max_rel_error: float


def absorption_oracle(depth: float, n_probes: int = 5, n_z: int = 100, t_step: float = 0.005,
                      band_khz: float = 20000.0, n_detune: int = 400) -> OracleResult:
    """Compare a weak 1 us gaussian pulse crossing a spectrally flat
    absorber of optical depth ``depth`` with the closed form, at ``n_probes``
    interior positions at the instant of peak input.

    The absorber is a top hat far wider than the pulse spectrum, which is
    the flat-density regime in which the closed form holds.
    """
    grid = SimGrid(n_z=n_z, t_step=t_step, n_detune=n_detune)
    medium = build_medium(grid, SpectralFeature(shape="top_hat", width=band_khz), StarkGradient())
    medium = replace(medium, coupling=depth / grid.length)
    pulse = PulseSpec(shape="gaussian", duration=1.0, area=1e-3, start_time=0.5)
    n_steps = int(round(pulse.t_end / t_step))
    times = np.arange(n_steps + 1) * t_step
    t_probe = times[int(np.argmin(np.abs(times - pulse.t_ref)))]
    _, trace = run_transport(medium, EnsembleState.ground(medium),
                             ScheduleSlice(pulse.sample(times, t_step)), "forward",
                             snapshot_times=[t_probe])
    idx = np.linspace(0, n_z - 1, n_probes + 2).round().astype(int)[1:-1]
    z = grid.z[idx]
    sim = trace.snapshots[0][idx]
    exact = analytic_absorption(0.5 * medium.coupling, pulse.field, z, t_probe)
    err = float(np.max(np.abs(np.abs(sim) / np.abs(exact) - 1.0)))
    return OracleResult(probe_points=[(float(zz), float(t_probe)) for zz in z],
                        analytic_field=exact, simulated_field=sim, max_rel_error=err)


# discrete-atom oracle ------------------------------------------------------

def _sample_detuning(feature: SpectralFeature, u):
    if feature.shape == "top_hat":
        return feature.center_rad + feature.width_rad * (u - 0.5)
    return feature.center_rad + feature.sigma_rad * norm.ppf(u)


def peak_optical_depth(medium: MediumSpec) -> float:
    """Largest optical depth over frequency for the current gradient."""
    half = medium.analysis_window
    f = np.linspace(-half, half, 4001) / (2 * math.pi * 1e-3)
    return float(max(np.max(medium.optical_depth(f)), medium.optical_depth(medium.feature.center)))


def brute_force_echo(n_atoms: int, medium: MediumSpec, schedule: ProtocolSchedule,
                     rtol: float = 1e-9, atol: float = 1e-13) -> FieldTrace:
    """Output field of ``n_atoms`` independent ions driven by the bare input.

    Ions are placed on an unscrambled 2-D Halton sequence mapped through the
    inverse CDF of the feature (detuning) and uniformly along z. Each obeys
    the linear coherence equation with the schedule's time-dependent Stark
    term; the field they radiate is summed to first order and added to the
    input. Only valid for optically thin samples.
    """
    if not 1 <= n_atoms <= 2000:
        raise ConfigError("n_atoms must lie in [1, 2000]", "n_atoms")
    depths = [peak_optical_depth(medium)]
    for e in schedule.events:
        if isinstance(e, SetGradient):
            depths.append(peak_optical_depth(with_gradient(medium, e.voltage, e.polarity)))
    if max(depths) > THIN_LIMIT:
        raise TooThick(f"peak optical depth {max(depths):.3g} exceeds {THIN_LIMIT}")
    grid = medium.grid
    pts = qmc.Halton(d=2, scramble=False).random(n_atoms + 1)[1:]
    delta0 = _sample_detuning(medium.feature, pts[:, 0])
    z = grid.z_min + grid.length * pts[:, 1]
    x = grid.normalized_position(z)
    weight = medium.feature.spectral_area * grid.length / n_atoms

    dt = grid.t_step
    n_total = int(math.ceil(schedule.record_until / dt - 1e-9))
    times = np.arange(n_total + 1) * dt
    pulses = [e.pulse for e in schedule.events if isinstance(e, InjectPulse)]
    rev = schedule.reversal
    t_rev = math.inf if rev is None else times[int(round(rev.time / dt))]

    def drive(t):
        return sum((p.field(t) for p in pulses), 0.0 + 0.0j)

    breaks = {0.0, float(times[-1]), min(t_rev, float(times[-1]))}
    for p in pulses:
        breaks.update(p.support)
    for t0, _, _, ramp in schedule.gradient_changes(medium):
        breaks.update((t0, t0 + ramp))
    breaks = sorted(b for b in breaks if 0.0 <= b <= times[-1])

    alpha = np.zeros(n_atoms, dtype=complex)
    emitted = np.zeros(n_total + 1, dtype=complex)
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b - a < 1e-12:
            continue
        mid = 0.5 * (a + b)
        sign = 1.0 if mid < t_rev else -1.0
        ramping = any(t0 < mid < t0 + ramp for t0, _, _, ramp in schedule.gradient_changes(medium))

        if ramping:
            def rhs(t, y, sign=sign):
                s = float(schedule.stark_at(medium, t))
                return -1j * (delta0 + s * x) * y + 0.5j * sign * drive(t)
        else:
            delta = delta0 + float(schedule.stark_at(medium, mid)) * x

            def rhs(t, y, sign=sign, delta=delta):
                return -1j * delta * y + 0.5j * sign * drive(t)

        mask = (times >= a - 1e-12) & (times <= b + 1e-12)
        t_eval = times[mask]
        sol = solve_ivp(rhs, (a, b), alpha, method="DOP853", t_eval=t_eval,
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise StarkEchoError(f"oracle integration failed: {sol.message}")
        emitted[mask] = 1j * sign * medium.kappa * weight * sol.y.sum(axis=0)
        alpha = sol.y[:, -1]

    drive_in = np.array([drive(t) for t in times])
    direction = "forward" if rev is None else "backward"
    if rev is None:
        out = drive_in + emitted
    else:
        # the input face only sees light sent in after the reversal
        late = [p for p in pulses if p.start_time >= rev.time]
        late_in = sum((p.field(times) for p in late), np.zeros_like(times, dtype=complex))
        out = np.where(times >= t_rev, late_in + emitted, 0.0)
    return FieldTrace(times=times, boundary_in=drive_in, boundary_out=out, direction=direction,
                      sample_step=dt, meta={"n_atoms": n_atoms})


def envelope_rms_error(trace: FieldTrace, reference: FieldTrace, t0: float, t1: float) -> float:
    """RMS difference of |Omega_out| over [t0, t1], relative to the
    reference's peak magnitude in that window."""
    _, a = trace.window(t0, t1)
    _, b = reference.window(t0, t1)
    a, b = np.abs(a), np.abs(b)
    return float(np.sqrt(np.mean((a - b) ** 2)) / np.max(b))


# sweeps --------------------------------------------------------------------

SWEEP_VARIABLES = ("tau", "input_area", "voltage", "optical_depth")
SWEEP_OUTPUTS = ("peak_time_us", "echo_energy", "efficiency", "fidelity", "input_energy",
                 "echo_intensity", "fid_intensity_at_2tau", "ratio")


@dataclass(frozen=True)
class EchoExperiment:
    """One echo run: a medium with the gradient on, an input pulse and the
    flip delay. ``fid_depth`` sets the peak optical depth of the
    gradient-off reference sample used for the FID columns; ``None`` matches
    it to the optical depth the broadened sample presents at line centre."""

    medium: MediumSpec
    pulse: PulseSpec
    tau: float = 10.0
    mode: str = "linearized"
    direction: str = "forward"
    fid_depth: float | None = None

    def run(self):
        if self.direction == "backward":
            return run_backward_crib(self.medium, self.pulse, self.tau, self.mode)
        return run_forward_echo(self.medium, self.pulse, self.tau, self.mode)

    def fid_reference(self, record_until: float) -> FieldTrace:
        off = with_gradient(self.medium, voltage=0.0)
        depth = self.medium.optical_depth(self.medium.feature.center) if self.fid_depth is None \
            else self.fid_depth
        off = replace(off, coupling=coupling_for_depth(off, float(depth)))
        return run_fid(off, self.pulse, self.mode, record_until=record_until)


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    base: EchoExperiment
    outputs: tuple = ("echo_energy", "efficiency")
    workers: int = field(default=1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}", "sweep.variable")
        if not self.values:
            raise ConfigError("sweep needs at least one value", "sweep.values")
        d = np.diff(self.values)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigError("sweep values must be strictly monotone", "sweep.values")
        if not self.outputs:
            raise ConfigError("sweep needs at least one output metric", "sweep.outputs")
        bad = [o for o in self.outputs if o not in SWEEP_OUTPUTS]
        if bad:
            raise ConfigError(f"unknown sweep outputs {bad}; choose from {SWEEP_OUTPUTS}", "sweep.outputs")

    @property
    def columns(self) -> list:
        cols = [self.variable]
        if self.variable == "tau":
            cols.append("total_delay")
        return cols + list(self.outputs) + ["error"]

    def experiment_for(self, value: float) -> EchoExperiment:
        b = self.base
        if self.variable == "tau":
            return replace(b, tau=value)
        if self.variable == "input_area":
            return replace(b, pulse=b.pulse.with_area(value))
        if self.variable == "voltage":
            return replace(b, medium=with_gradient(b.medium, voltage=value))
        return replace(b, medium=replace(b.medium, coupling=coupling_for_depth(b.medium, value)))

    def config_hash(self) -> str:
        payload = json.dumps({"variable": self.variable, "values": self.values,
                              "outputs": self.outputs, "base": _describe(self.base)},
                             sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()


def _describe(exp: EchoExperiment) -> dict:
    m = exp.medium
    return {
        "grid": asdict(m.grid), "feature": asdict(m.feature), "gradient": asdict(m.gradient),
        "coupling": m.coupling, "homogeneous_t2": m.homogeneous_t2, "window": m.analysis_window,
        "pulse": asdict(exp.pulse), "tau": exp.tau, "mode": exp.mode,
        "direction": exp.direction, "fid_depth": exp.fid_depth,
    }


@dataclass
class SweepTable:
    columns: list
    rows: list
    config_hash: str

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                                 for v in row])


def _sweep_row(spec: SweepSpec, value: float) -> list:
    row = {spec.variable: value}
    if spec.variable == "tau":
        row["total_delay"] = 2.0 * value
    try:
        exp = spec.experiment_for(value)
        trace, m = exp.run()
        echo_time = exp.pulse.t_ref + 2.0 * exp.tau
        row.update(m.to_dict())
        row["input_energy"] = m.echo_energy / m.efficiency if m.efficiency else float("nan")
        row["echo_intensity"] = abs(trace.value_at(echo_time)) ** 2
        if {"fid_intensity_at_2tau", "ratio"} & set(spec.outputs):
            fid = exp.fid_reference(record_until=trace.times[-1])
            row["fid_intensity_at_2tau"] = abs(fid.value_at(echo_time)) ** 2
            row["ratio"] = row["echo_intensity"] / row["fid_intensity_at_2tau"]
        row["error"] = ""
    except (StarkEchoError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return [row.get(c) for c in spec.columns]


def run_sweep(spec: SweepSpec) -> SweepTable:
    """Run one experiment per value; rows keep the order of ``values``.
    Failures are recorded in the row's ``error`` column."""
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(_sweep_row, [spec] * len(spec.values), spec.values))
    else:
        rows = [_sweep_row(spec, v) for v in spec.values]
    return SweepTable(columns=spec.columns, rows=rows, config_hash=spec.config_hash())
