"""Grids, units and the absorbing medium.

Units used throughout the package: time in microseconds, position in
millimetres, detunings in kHz at the API surface and rad/us internally.
Field envelopes are stored as Rabi frequencies (rad/us), so the dipole
moment never appears on its own.

The medium is a narrow spectral feature (the prepared anti-hole) that a
linear Stark gradient translates rigidly in frequency: at position ``z`` the
density of ions at detuning ``delta`` is ``f(delta - delta_S(z))`` with ``f``
the feature profile normalised to unit peak.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import erf

from .errors import (
    CalibrationDiverged,
    ConfigError,
    GridTooNarrow,
    NonPositiveWidth,
    OutOfRange,
    StepTooLarge,
)

KHZ = 2.0 * math.pi * 1e-3  # rad/us per kHz

# 40 % peak absorption of the prepared feature
NOMINAL_PEAK_OPTICAL_DEPTH = -math.log(0.60)
NOMINAL_FEATURE_WIDTH_KHZ = 25.0
NOMINAL_BROADENING_RATE = 42.0  # kHz per volt on the electrodes
NOMINAL_VOLTAGE = 25.0
NOMINAL_LENGTH_MM = 4.0

FEATURE_SHAPES = ("top_hat", "gaussian")
PULSE_SHAPES = ("square", "gaussian", "ramp")

_GAUSS_SUPPORT = 2.0  # intrinsic grid spans +/- this many FWHM for gaussians
_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class SimGrid:
    """Discretisation of position, time and intrinsic detuning.

    ``detune_half_width`` (rad/us) is the absolute analysis window used when
    the broadened density is sampled; ``None`` lets :func:`build_medium`
    size it. ``c_medium`` (mm/us) defaults to infinity, i.e. the quasi-static
    limit in which the transit time through the sample is neglected.
    """

    z_min: float = 0.0
    z_max: float = NOMINAL_LENGTH_MM
    n_z: int = 200
    t_step: float = 0.02
    n_detune: int = 256
    detune_half_width: float | None = None
    c_medium: float = math.inf

    def __post_init__(self):
        if int(self.n_z) != self.n_z or self.n_z < 2:
            raise ConfigError(f"n_z must be an integer >= 2, got {self.n_z}", "grid.n_z")
        if int(self.n_detune) != self.n_detune or self.n_detune < 1:
            raise ConfigError(
                f"n_detune must be an integer >= 1, got {self.n_detune}", "grid.n_detune"
            )
        if not self.t_step > 0:
            raise ConfigError(f"t_step must be positive, got {self.t_step}", "grid.t_step")
        if not self.z_max > self.z_min:
            raise ConfigError("z_max must exceed z_min", "grid.z_max")
        if self.detune_half_width is not None and not self.detune_half_width > 0:
            raise ConfigError("detune_half_width must be positive", "grid.detune_half_width")
        if not self.c_medium > 0:
            raise ConfigError("c_medium must be positive", "grid.c_medium")
        if math.isfinite(self.c_medium) and self.t_step > self.max_t_step:
            raise StepTooLarge(
                f"t_step={self.t_step} us exceeds the transit bound "
                f"dz/c = {self.max_t_step:.6g} us; use t_step <= {self.max_t_step:.6g}",
                "grid.t_step",
            )

    @property
    def length(self) -> float:
        return self.z_max - self.z_min

    @property
    def dz(self) -> float:
        return self.length / (self.n_z - 1)

    @property
    def max_t_step(self) -> float:
        return self.dz / self.c_medium

    @property
    def z(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.n_z)

    def normalized_position(self, z):
        """Map ``z`` onto [-1, 1] across the sample."""
        return 2.0 * (np.asarray(z, dtype=float) - self.z_min) / self.length - 1.0

    def z_weights(self) -> np.ndarray:
        w = np.full(self.n_z, self.dz)
        w[0] = w[-1] = 0.5 * self.dz
        return w


@dataclass(frozen=True)
class SpectralFeature:
    """Prepared absorption feature. ``width`` and ``center`` are in kHz;
    ``width`` is the full width for a top hat and the FWHM for a gaussian."""

    shape: str = "top_hat"
    width: float = NOMINAL_FEATURE_WIDTH_KHZ
    center: float = 0.0
    peak_optical_depth: float = NOMINAL_PEAK_OPTICAL_DEPTH

    def __post_init__(self):
        if self.shape not in FEATURE_SHAPES:
            raise ConfigError(
                f"feature shape must be one of {FEATURE_SHAPES}, got {self.shape!r}",
                "feature.shape",
            )
        if not self.width > 0:
            raise NonPositiveWidth(f"feature width must be positive, got {self.width}", "feature.width")
        if not self.peak_optical_depth >= 0:
            raise ConfigError("peak_optical_depth must be >= 0", "feature.peak_optical_depth")

    @property
    def width_rad(self) -> float:
        return self.width * KHZ

    @property
    def center_rad(self) -> float:
        return self.center * KHZ

    @property
    def sigma_rad(self) -> float:
        return self.width_rad * _FWHM_TO_SIGMA

    @property
    def support_half(self) -> float:
        """Half extent (rad/us) of the intrinsic detuning grid."""
        if self.shape == "top_hat":
            return 0.5 * self.width_rad
        return _GAUSS_SUPPORT * self.width_rad

    @property
    def spectral_area(self) -> float:
        """Integral of the unit-peak profile over detuning (rad/us)."""
        if self.shape == "top_hat":
            return self.width_rad
        return self.sigma_rad * math.sqrt(2.0 * math.pi)

    def profile(self, delta):
        """Unit-peak density at absolute detuning ``delta`` (rad/us)."""
        u = np.asarray(delta, dtype=float) - self.center_rad
        if self.shape == "top_hat":
            # closed interval so that grid end points sit inside the feature
            half = 0.5 * self.width_rad * (1.0 + 1e-12)
            return (np.abs(u) <= half).astype(float)
        return np.exp(-0.5 * (u / self.sigma_rad) ** 2)

    def interval_integral(self, lo, hi):
        """Exact integral of the profile over [lo, hi] (rad/us), vectorised."""
        lo = np.asarray(lo, dtype=float) - self.center_rad
        hi = np.asarray(hi, dtype=float) - self.center_rad
        if self.shape == "top_hat":
            half = 0.5 * self.width_rad
            return np.clip(np.minimum(hi, half) - np.maximum(lo, -half), 0.0, None)
        s = self.sigma_rad * math.sqrt(2.0)
        return 0.5 * self.spectral_area * (erf(hi / s) - erf(lo / s))

    def intrinsic_grid(self, n: int):
        """Detunings (rad/us) and trapezoid weights covering the feature.

        A single point carries the whole spectral area, which is how a
        zero-width line is represented.
        """
        if n == 1:
            return np.array([self.center_rad]), np.array([self.spectral_area])
        half = self.support_half
        deltas = self.center_rad + np.linspace(-half, half, n)
        h = 2.0 * half / (n - 1)
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        return deltas, w


@dataclass(frozen=True)
class StarkGradient:
    """Linear Stark gradient. ``broadening_rate`` in kHz/V, ``voltage`` is the
    magnitude on the electrodes in volts and ``polarity`` its sign (0 = off)."""

    broadening_rate: float = NOMINAL_BROADENING_RATE
    voltage: float = 0.0
    polarity: int = 1

    def __post_init__(self):
        if self.polarity not in (-1, 0, 1):
            raise ConfigError(f"polarity must be -1, 0 or +1, got {self.polarity}", "gradient.polarity")
        if not self.voltage >= 0:
            raise ConfigError("voltage is a magnitude; use polarity for its sign", "gradient.voltage")
        if not self.broadening_rate >= 0:
            raise ConfigError("broadening_rate must be >= 0", "gradient.broadening_rate")

    @property
    def half_width_khz(self) -> float:
        """Largest Stark shift in the sample (kHz), reached at either face."""
        return self.broadening_rate * self.voltage

    @property
    def half_width(self) -> float:
        return self.half_width_khz * KHZ

    @property
    def signed_half_width(self) -> float:
        return self.polarity * self.half_width

    @property
    def is_on(self) -> bool:
        return self.polarity != 0 and self.voltage != 0 and self.broadening_rate != 0

    def flipped(self) -> "StarkGradient":
        return replace(self, polarity=-self.polarity)


def stark_shift_at(gradient: StarkGradient, z, grid: SimGrid):
    """Stark shift in kHz at position ``z`` (mm); antisymmetric about the
    sample centre."""
    z_arr = np.asarray(z, dtype=float)
    tol = 1e-12 * max(1.0, abs(grid.z_max), abs(grid.z_min))
    if np.any(z_arr < grid.z_min - tol) or np.any(z_arr > grid.z_max + tol):
        raise OutOfRange(f"z={z} outside [{grid.z_min}, {grid.z_max}]")
    # x(z_c + u) = -x(z_c - u) exactly when evaluated through the centre
    z_c = 0.5 * (grid.z_min + grid.z_max)
    x = (z_arr - z_c) / (0.5 * grid.length)
    out = gradient.polarity * gradient.half_width_khz * x
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class MediumSpec:
    """Complete description of the absorbing sample.

    ``coupling`` is the intensity absorption coefficient (per mm) at the peak
    of the unbroadened feature, so the peak optical depth is
    ``coupling * length``. ``homogeneous_t2`` is in ms (None = no decay).
    """

    grid: SimGrid
    feature: SpectralFeature
    gradient: StarkGradient
    coupling: float = 0.0
    homogeneous_t2: float | None = None
    window: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.coupling >= 0:
            raise ConfigError("coupling must be >= 0", "coupling.eta")
        if self.homogeneous_t2 is not None and not self.homogeneous_t2 > 0:
            raise ConfigError("homogeneous_T2 must be positive", "coupling.homogeneous_T2")

    @property
    def analysis_window(self) -> float:
        """Half width (rad/us) of the absolute detuning window."""
        if self.window is not None:
            return self.window
        if self.grid.detune_half_width is not None:
            return self.grid.detune_half_width
        f = self.feature
        return abs(f.center_rad) + f.support_half + 1.2 * self.gradient.half_width

    # intrinsic detuning grid shared by all positions
    @cached_property
    def _intrinsic(self):
        return self.feature.intrinsic_grid(self.grid.n_detune)

    @property
    def detunings(self) -> np.ndarray:
        return self._intrinsic[0]

    @property
    def quad_weights(self) -> np.ndarray:
        return self._intrinsic[1]

    @cached_property
    def density(self) -> np.ndarray:
        """Unit-peak profile on the intrinsic grid."""
        if self.grid.n_detune == 1:
            return np.ones(1)
        return self.feature.profile(self.detunings)

    @cached_property
    def source_weights(self) -> np.ndarray:
        """Quadrature weight times density, one entry per intrinsic detuning."""
        return self.quad_weights * self.density

    @cached_property
    def z(self) -> np.ndarray:
        return self.grid.z

    @cached_property
    def x(self) -> np.ndarray:
        return self.grid.normalized_position(self.z)

    @property
    def kappa(self) -> float:
        """Field coupling: dOmega/dz = i kappa * integral(f alpha d delta)."""
        return self.coupling / math.pi

    @property
    def decay_rate(self) -> float:
        if self.homogeneous_t2 is None:
            return 0.0
        return 1.0 / (self.homogeneous_t2 * 1e3)

    @property
    def stark_half(self) -> float:
        """Signed Stark half width (rad/us) for the current polarity."""
        return self.gradient.signed_half_width

    def stark_detuning(self, stark_half=None) -> np.ndarray:
        """Stark shift (rad/us) at every grid position."""
        s = self.stark_half if stark_half is None else stark_half
        return s * self.x

    def total_detuning(self, stark_half=None) -> np.ndarray:
        """(n_detune, n_z) detunings including the Stark term."""
        return self.detunings[:, None] + self.stark_detuning(stark_half)[None, :]

    # absolute-frequency views of g(delta, z)
    def density_at(self, delta, z):
        """g(delta, z) for absolute detuning ``delta`` (rad/us), unit peak."""
        x = self.grid.normalized_position(z)
        return self.feature.profile(np.asarray(delta) - self.stark_half * x)

    def sampled_density(self, n: int | None = None):
        """Cell-averaged g on the absolute window, shape (n, n_z).

        Cell averages make the detuning integral exact for any Stark
        translation, so the spectral area is the same at every z.
        """
        half = self.analysis_window
        if n is None:
            n = int(math.ceil(64 * 2 * half / self.feature.width_rad)) + 1
        nodes = np.linspace(-half, half, n)
        h = nodes[1] - nodes[0]
        shift = self.stark_detuning()[None, :]
        lo = nodes[:, None] - 0.5 * h - shift
        hi = nodes[:, None] + 0.5 * h - shift
        return nodes, self.feature.interval_integral(lo, hi) / h

    def optical_depth(self, freq_khz=0.0, coupling: float | None = None):
        """Intensity optical depth at absolute frequency ``freq_khz``.

        Integrates the translated feature over the sample length exactly.
        """
        eta = self.coupling if coupling is None else coupling
        w = np.asarray(freq_khz, dtype=float) * KHZ
        s = abs(self.stark_half)
        if s == 0:
            through = self.feature.profile(w) * 2.0
        else:
            # integral over x in [-1, 1] of f(w - s x) = (1/s) * integral of f over [w-s, w+s]
            through = self.feature.interval_integral(w - s, w + s) / s
        return eta * 0.5 * self.grid.length * through

    def resonant_absorption(self, freq_khz=None) -> float:
        """Fraction of weak monochromatic intensity absorbed at ``freq_khz``
        (default: feature centre)."""
        f = self.feature.center if freq_khz is None else freq_khz
        return float(1.0 - np.exp(-self.optical_depth(f)))

    @property
    def broadened_span_khz(self) -> float:
        """Spread of local feature centres across the sample (kHz)."""
        return 2.0 * self.gradient.half_width_khz if self.gradient.is_on else 0.0

    @property
    def broadened_width_khz(self) -> float:
        """Full extent of the broadened line (kHz): centre span plus feature."""
        return self.broadened_span_khz + self.feature.width


def build_medium(grid: SimGrid, feature: SpectralFeature, gradient: StarkGradient) -> MediumSpec:
    """Assemble an uncalibrated medium (coupling 0).

    The absolute detuning window must hold the feature at its largest Stark
    displacement; when the grid leaves it unset it is sized with a 20 %
    margin on the Stark shift.
    """
    need = abs(feature.center_rad) + feature.support_half + gradient.half_width
    if grid.detune_half_width is None:
        window = abs(feature.center_rad) + feature.support_half + 1.2 * gradient.half_width
    else:
        window = grid.detune_half_width
        if window < need * (1.0 - 1e-12):
            raise GridTooNarrow(
                f"detune_half_width={window:.6g} rad/us cannot hold the feature plus the "
                f"maximum Stark shift ({need:.6g} rad/us)",
                "grid.detune_half_width",
            )
    return MediumSpec(grid=grid, feature=feature, gradient=gradient, coupling=0.0, window=window)


def with_gradient(medium: MediumSpec, voltage=None, polarity=None) -> MediumSpec:
    """Copy of ``medium`` with a new gradient setting (window re-checked)."""
    g = medium.gradient
    g = replace(
        g,
        voltage=g.voltage if voltage is None else voltage,
        polarity=g.polarity if polarity is None else polarity,
    )
    rebuilt = build_medium(medium.grid, medium.feature, g)
    return replace(rebuilt, coupling=medium.coupling, homogeneous_t2=medium.homogeneous_t2)


def coupling_for_depth(medium: MediumSpec, depth: float, freq_khz=None) -> float:
    """Coupling that gives optical depth ``depth`` at ``freq_khz`` (default
    feature centre) with the medium's current gradient."""
    f = medium.feature.center if freq_khz is None else freq_khz
    unit = float(medium.optical_depth(f, coupling=1.0))
    if unit <= 0:
        raise ConfigError("no absorption at the requested frequency", "feature.center")
    return depth / unit


@dataclass(frozen=True)
class PulseSpec:
    """Input pulse. ``duration`` in us (full length for square/ramp, amplitude
    FWHM for gaussian), ``area`` in rad, ``carrier_detuning`` in kHz.

    The ``ramp`` shape rises as ``u sin^2(pi u)`` and is deliberately
    asymmetric in time.
    """

    shape: str = "square"
    duration: float = 1.0
    area: float = 0.01
    carrier_detuning: float = 0.0
    start_time: float = 1.0

    def __post_init__(self):
        if self.shape not in PULSE_SHAPES:
            raise ConfigError(f"pulse shape must be one of {PULSE_SHAPES}, got {self.shape!r}", "pulse.shape")
        if not self.duration > 0:
            raise ConfigError("pulse duration must be positive", "pulse.duration")
        if not self.area >= 0:
            raise ConfigError("pulse area must be >= 0", "pulse.area")

    @property
    def support(self) -> tuple[float, float]:
        if self.shape == "gaussian":
            return self.start_time, self.start_time + 2 * _GAUSS_SUPPORT * self.duration
        return self.start_time, self.start_time + self.duration

    @property
    def t_end(self) -> float:
        return self.support[1]

    @property
    def t_ref(self) -> float:
        """Midpoint of the support; echoes are timed from here."""
        a, b = self.support
        return 0.5 * (a + b)

    @property
    def amplitude(self) -> float:
        """Scale factor multiplying the unit-peak shape."""
        if self.shape == "square":
            return self.area / self.duration
        if self.shape == "ramp":
            return 4.0 * self.area / self.duration
        c = math.sqrt(4.0 * math.log(2.0))
        norm = self.duration * math.sqrt(math.pi) / c * erf(c * _GAUSS_SUPPORT)
        return self.area / norm

    def envelope(self, t):
        """Real envelope (rad/us) at times ``t``."""
        t = np.asarray(t, dtype=float)
        a, b = self.support
        inside = (t >= a) & (t <= b)
        if self.shape == "square":
            shape = np.ones_like(t)
        elif self.shape == "ramp":
            u = (t - a) / self.duration
            shape = u * np.sin(np.pi * u) ** 2
        else:
            shape = np.exp(-4.0 * math.log(2.0) * ((t - self.t_ref) / self.duration) ** 2)
        return np.where(inside, self.amplitude * shape, 0.0)

    def field(self, t):
        t = np.asarray(t, dtype=float)
        carrier = np.exp(-1j * KHZ * self.carrier_detuning * (t - self.t_ref))
        return self.envelope(t) * carrier

    def sample(self, t, dt: float):
        """Node values for a grid of spacing ``dt``.

        Square pulses are averaged over each node's dual cell so the
        trapezoid area is exact and edges falling on a node get half
        weight; smooth shapes are point-sampled.
        """
        t = np.asarray(t, dtype=float)
        if self.shape != "square":
            return self.field(t)
        a, b = self.support
        overlap = np.clip(np.minimum(t + 0.5 * dt, b) - np.maximum(t - 0.5 * dt, a), 0.0, None)
        carrier = np.exp(-1j * KHZ * self.carrier_detuning * (t - self.t_ref))
        return self.amplitude * overlap / dt * carrier

    def energy(self) -> float:
        """Time-integrated squared envelope."""
        from scipy.integrate import quad

        a, b = self.support
        if self.shape == "square":
            return self.amplitude**2 * self.duration
        val, _ = quad(lambda t: float(self.envelope(t)) ** 2, a, b, limit=200)
        return val

    def with_area(self, area: float) -> "PulseSpec":
        return replace(self, area=area)


def probe_transmission(medium: MediumSpec, coupling: float | None = None) -> float:
    """Energy transmission of a weak, spectrally narrow probe at line centre.

    Runs a small dedicated simulation: few z cells (the unbroadened medium is
    uniform along z), a detuning grid fine enough that the discrete ensemble
    does not rephase inside the probe window, and a gaussian probe whose
    spectrum is ~1/25 of the feature width.
    """
    from .dynamics import EnsembleState
    from .transport import ScheduleSlice, run_transport

    feat = medium.feature
    eta = medium.coupling if coupling is None else coupling
    duration = 9375.0 / feat.width  # us
    n_det = 201 if feat.shape == "top_hat" else 801
    half = feat.support_half
    dt = min(0.1 / half, duration / 200.0)
    probe = PulseSpec(shape="gaussian", duration=duration, area=1e-3,
                      carrier_detuning=feat.center, start_time=0.0)
    span = probe.t_end
    n_steps = int(math.ceil(span / dt))
    grid = SimGrid(z_min=medium.grid.z_min, z_max=medium.grid.z_max, n_z=16,
                   t_step=span / n_steps, n_detune=n_det)
    probe_medium = replace(
        build_medium(grid, feat, replace(medium.gradient, voltage=0.0)),
        coupling=eta,
        homogeneous_t2=medium.homogeneous_t2,
    )
    times = np.arange(n_steps + 1) * grid.t_step
    drive = probe.sample(times, grid.t_step)
    state = EnsembleState.ground(probe_medium)
    _, trace = run_transport(probe_medium, state, ScheduleSlice(drive=drive), "forward")
    e_in = trapezoid(np.abs(trace.boundary_in) ** 2, dx=grid.t_step)
    e_out = trapezoid(np.abs(trace.boundary_out) ** 2, dx=grid.t_step)
    return float(e_out / e_in)


def calibrate_coupling(medium: MediumSpec, target_peak_optical_depth: float, *,
                       verify: bool = True, rel_tol: float = 0.005) -> MediumSpec:
    """Set ``coupling`` so a weak probe at line centre sees the target optical
    depth with the gradient off.

    The small-signal value ``d / L`` is exact in the continuum; a probe
    simulation confirms it and, if it disagrees by more than ``rel_tol``,
    the coupling is refined by bisection against the simulated
    transmission.
    """
    d = float(target_peak_optical_depth)
    if not d >= 0:
        raise ConfigError("target optical depth must be >= 0", "feature.peak_optical_depth")
    if d == 0:
        return replace(medium, coupling=0.0, feature=replace(medium.feature, peak_optical_depth=0.0))
    unbroadened = replace(medium, gradient=replace(medium.gradient, voltage=0.0))
    eta = coupling_for_depth(unbroadened, d)
    if verify:
        target_t = math.exp(-d)

        def mismatch(c):
            return -math.log(probe_transmission(unbroadened, c)) - d

        if abs(probe_transmission(unbroadened, eta) / target_t - 1.0) > rel_tol:
            lo, hi = 0.25 * eta, 4.0 * eta
            f_lo, f_hi = mismatch(lo), mismatch(hi)
            if f_lo * f_hi > 0:
                raise CalibrationDiverged(
                    f"cannot bracket optical depth {d} with coupling in [{lo:.4g}, {hi:.4g}]"
                )
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                f_mid = mismatch(mid)
                if abs(f_mid) < 0.2 * rel_tol:
                    break
                if f_lo * f_mid <= 0:
                    hi = mid
                else:
                    lo, f_lo = mid, f_mid
            else:
                raise CalibrationDiverged("bisection did not converge")
            warnings.warn(f"probe simulation moved coupling from {eta:.6g} to {mid:.6g} per mm")
            eta = mid
    return replace(medium, coupling=eta, feature=replace(medium.feature, peak_optical_depth=d))
