"""Field propagation through the sample, co-integrated with the atoms.

The transit time through a 4 mm crystal (~20 ps) is negligible against
microsecond dynamics, so ``1/c d/dt`` is dropped from the envelope equations
and at every time step the field is obtained by sweeping along z:

    dOmega/dz = i kappa * sum_i w_i f(delta_i) alpha(delta_i, z)

from the input face (z_min forward, z_max backward). Because the coherence
after the step depends linearly on the new field at the same z, the
trapezoidal sweep becomes a scalar recurrence that is solved exactly, cell by
cell, with the atomic update folded in. Full-Bloch runs use the response
linearised about the current inversion for the sweep and then rotate the
Bloch vectors exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.integrate import trapezoid

from .dynamics import EnsembleState, drive_sign, rotate_bloch
from .errors import DirectionMismatch, GridMismatch, StepTooLarge
from .model import MediumSpec


@dataclass
class FieldTrace:
    """Field envelopes at the sample faces.

    ``boundary_in`` is the drive at the input face and ``boundary_out`` the
    field leaving the opposite face, both sampled every ``sample_step`` us at
    ``times``. Optional ``snapshots`` hold Omega(z) at ``snapshot_times``.
    """

    times: np.ndarray
    boundary_in: np.ndarray
    boundary_out: np.ndarray
    direction: str
    sample_step: float
    snapshot_times: np.ndarray | None = None
    snapshots: np.ndarray | None = None
    z: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def energy_in(self) -> float:
        return float(trapezoid(np.abs(self.boundary_in) ** 2, dx=self.sample_step))

    def energy_out(self) -> float:
        return float(trapezoid(np.abs(self.boundary_out) ** 2, dx=self.sample_step))

    def value_at(self, t: float) -> complex:
        i = int(round((t - self.times[0]) / self.sample_step))
        return complex(self.boundary_out[i])

    def window(self, t0: float, t1: float):
        m = (self.times >= t0 - 1e-9) & (self.times <= t1 + 1e-9)
        return self.times[m], self.boundary_out[m]

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Write ``t_us, in_re, in_im, out_re, out_im, out_abs`` rows."""
        with open(path, "w", newline="") as fh:
            for k, v in sorted((metadata or {}).items()):
                fh.write(f"# {k}={v}\n")
            fh.write(f"# direction={self.direction}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_us", "in_re", "in_im", "out_re", "out_im", "out_abs"])
            for t, a, b in zip(self.times, self.boundary_in, self.boundary_out):
                writer.writerow([_fmt(t), _fmt(a.real), _fmt(a.imag),
                                 _fmt(b.real), _fmt(b.imag), _fmt(abs(b))])

    def snapshot_csv(self, path) -> None:
        """|Omega(z, t)| matrix: one row per snapshot time, one column per z."""
        if self.snapshots is None:
            raise ValueError("trace holds no snapshots")
        with open(path, "w", newline="") as fh:
            fh.write(f"# n_z={len(self.z)} z_min_mm={_fmt(self.z[0])} z_max_mm={_fmt(self.z[-1])}"
                     f" direction={self.direction}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_us"] + [f"z={_fmt(z)}" for z in self.z])
            for t, row in zip(self.snapshot_times, self.snapshots):
                writer.writerow([_fmt(t)] + [_fmt(abs(v)) for v in row])


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class ScheduleSlice:
    """Drive and gradient for one transport run.

    ``drive`` holds node values at the input face, starting at the state's
    time; ``stark`` holds the signed Stark half width (rad/us) for each step,
    evaluated at the step midpoint. ``None`` keeps the state's polarity.
    """

    drive: np.ndarray
    stark: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.drive) - 1


@njit(cache=True)
def _sweep(A, C, omega_in, kappa, dz, forward):
    n = A.shape[0]
    out = np.empty(n, dtype=np.complex128)
    if forward:
        j = 0
        step = 1
        a = 0.5j * kappa * dz
    else:
        j = n - 1
        step = -1
        a = -0.5j * kappa * dz
    out[j] = omega_in
    p = A[j] + C[j] * omega_in
    for _ in range(n - 1):
        k = j + step
        val = (out[j] + a * (p + A[k])) / (1.0 - a * C[k])
        out[k] = val
        p = A[k] + C[k] * val
        j = k
    return out


def polarization_source(state: EnsembleState, medium: MediumSpec, z_index=None):
    """Coupling-scaled detuning integral ``kappa * sum_i w_i f_i alpha_i``.

    Returns one value per z (or the value at ``z_index``). The sum runs over
    detunings in a fixed order.
    """
    state.check_grid(medium)
    src = medium.kappa * (medium.source_weights @ state.coherence)
    if z_index is None:
        return src
    if not 0 <= z_index < medium.grid.n_z:
        raise GridMismatch(f"z index {z_index} outside grid")
    return complex(src[z_index])


def stored_excitation(state: EnsembleState, medium: MediumSpec) -> float:
    """Field-energy equivalent of the atomic excitation,
    ``2 kappa * integral dz sum_i w_i f_i |alpha_i|^2``."""
    per_z = medium.source_weights @ (np.abs(state.coherence) ** 2)
    return float(2.0 * medium.kappa * np.dot(medium.grid.z_weights(), per_z))


def _quasi_static_profile(state, medium, omega_in, forward):
    A = medium.source_weights @ state.coherence
    C = np.zeros_like(A)
    return _sweep(A, C, complex(omega_in), medium.kappa, medium.grid.dz, forward)


def run_transport(medium: MediumSpec, state: EnsembleState, schedule_slice: ScheduleSlice,
                  direction: str, snapshot_times=None):
    """Advance atoms and field together over ``schedule_slice``.

    Returns the new state and a :class:`FieldTrace` whose ``boundary_out`` is
    sampled at the face opposite the drive.
    """
    state.check_grid(medium)
    sign = drive_sign(direction)
    if state.direction != direction:
        raise DirectionMismatch(f"state is {state.direction}, transport asked for {direction}")
    if direction == "backward" and not state.phase_matched:
        raise DirectionMismatch("backward transport requires a prior phase_match")
    grid = medium.grid
    if math.isfinite(grid.c_medium) and grid.t_step > grid.max_t_step:
        raise StepTooLarge(f"t_step exceeds dz/c = {grid.max_t_step:.6g} us", "grid.t_step")
    dt = grid.t_step
    forward = direction == "forward"
    drive = np.asarray(schedule_slice.drive, dtype=complex)
    n_steps = len(drive) - 1
    if schedule_slice.stark is None:
        stark = np.full(n_steps, state.polarity_sign * medium.gradient.half_width)
    else:
        stark = np.asarray(schedule_slice.stark, dtype=float)
        if len(stark) != n_steps:
            raise ValueError("stark profile needs one value per step")

    G = medium.source_weights
    kappa = medium.kappa
    dz = grid.dz
    x = medium.x
    full = state.inversion is not None
    alpha = state.coherence.copy()
    w = None if not full else state.inversion.copy()

    times = state.time + dt * np.arange(n_steps + 1)
    out = np.empty(n_steps + 1, dtype=complex)
    snap_idx = {}
    if snapshot_times is not None:
        for t in snapshot_times:
            k = int(round((t - state.time) / dt))
            if 0 <= k <= n_steps:
                snap_idx[k] = t
    snaps = {}

    om = _quasi_static_profile(state, medium, drive[0], forward)
    out[0] = om[-1] if forward else om[0]
    if 0 in snap_idx:
        snaps[0] = om.copy()

    cached_s = None
    for n in range(n_steps):
        s = stark[n]
        if s != cached_s:
            delta_tot = medium.detunings[:, None] + s * x[None, :]
            lam = 1j * delta_tot + medium.decay_rate
            xl = lam * dt
            E = np.exp(-xl)
            small = np.abs(xl) < 1e-8
            phi = np.where(small, dt * (1.0 - 0.5 * xl), -np.expm1(-xl) / np.where(small, 1.0, lam))
            R_lin = (0.5j * sign) * phi
            C_lin = 0.5 * (G @ R_lin)
            cached_s = s
        if full:
            R = R_lin * (-w)
            C = 0.5 * (G @ R)
        else:
            R, C = R_lin, C_lin
        Ea = E * alpha
        A = G @ Ea + C * om
        om_next = _sweep(A, C, drive[n + 1], kappa, dz, forward)
        om_mid = 0.5 * (om + om_next)
        if full:
            alpha, w = rotate_bloch(alpha, w, delta_tot, sign * om_mid, dt, medium.decay_rate)
        else:
            alpha = Ea + R * om_mid[None, :]
        om = om_next
        out[n + 1] = om[-1] if forward else om[0]
        if n + 1 in snap_idx:
            snaps[n + 1] = om.copy()

    new_state = replace(state, coherence=alpha, inversion=w, time=float(times[-1]))
    if n_steps and stark[-1] != 0 and medium.gradient.half_width:
        new_state.polarity_sign = int(np.sign(stark[-1]))
    trace = FieldTrace(times=times, boundary_in=drive, boundary_out=out,
                       direction=direction, sample_step=dt, z=medium.z.copy())
    if snap_idx:
        keys = sorted(snaps)
        trace.snapshot_times = times[keys]
        trace.snapshots = np.array([snaps[k] for k in keys])
    return new_state, trace
