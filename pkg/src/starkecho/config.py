"""INI configuration: parsing, validation and construction of model objects.

Sections and units::

    [grid]      z_min, z_max (mm), n_z, t_step (us), n_detune,
                detune_half_width (rad/us), c_medium (mm/us, default inf)
    [feature]   shape, width (kHz), center (kHz), peak_optical_depth
    [gradient]  broadening_rate (kHz/V), voltage (V), polarity (-1, 0, 1)
    [coupling]  eta (per mm; omit to calibrate), homogeneous_T2 (ms)
    [pulse]     shape, duration (us), area (rad), carrier_detuning (kHz), start_time (us)
    [run]       mode, tau (us), record_until (us), workers

Omitted sections take the defaults below. A present [feature] section must
state its ``width``.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import replace

from .dynamics import normalize_mode
from .errors import ConfigError, ModeMismatch
from .model import (
    NOMINAL_BROADENING_RATE,
    NOMINAL_FEATURE_WIDTH_KHZ,
    NOMINAL_LENGTH_MM,
    NOMINAL_PEAK_OPTICAL_DEPTH,
    MediumSpec,
    PulseSpec,
    SimGrid,
    SpectralFeature,
    StarkGradient,
    build_medium,
    calibrate_coupling,
)


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


# key -> (parser, default)
SCHEMA = {
    "grid": {
        "z_min": (float, 0.0),
        "z_max": (float, NOMINAL_LENGTH_MM),
        "n_z": (int, 200),
        "t_step": (float, 0.02),
        "n_detune": (int, 256),
        "detune_half_width": (_opt_float, None),
        "c_medium": (float, math.inf),
    },
    "feature": {
        "shape": (str, "top_hat"),
        "width": (float, NOMINAL_FEATURE_WIDTH_KHZ),
        "center": (float, 0.0),
        "peak_optical_depth": (float, NOMINAL_PEAK_OPTICAL_DEPTH),
    },
    "gradient": {
        "broadening_rate": (float, NOMINAL_BROADENING_RATE),
        "voltage": (float, 0.0),
        "polarity": (int, 1),
    },
    "coupling": {
        "eta": (_opt_float, None),
        "homogeneous_T2": (_opt_float, None),
    },
    "pulse": {
        "shape": (str, "square"),
        "duration": (float, 1.0),
        "area": (float, 0.01),
        "carrier_detuning": (float, 0.0),
        "start_time": (float, 1.0),
    },
    "run": {
        "mode": (str, "linearized"),
        "tau": (float, 10.0),
        "record_until": (_opt_float, None),
        "workers": (int, 1),
    },
}
REQUIRED_IF_PRESENT = {"feature": ("width",)}


def validate_config(text: str, overrides: dict | None = None):
    """Parse and check ``text``.

    Returns ``(resolved, errors)``: ``resolved`` is a nested dict with every
    default filled in plus derived quantities (``None`` when there are
    errors); ``errors`` lists ``(key, message)`` pairs, one per violation.
    ``overrides`` maps ``"section.key"`` to already-typed values and wins
    over the file.
    """
    errors = []
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text or "")
    except configparser.Error as exc:
        return None, [("config", f"unparseable config: {exc}")]

    resolved = {}
    for section in cp.sections():
        if section not in SCHEMA:
            errors.append((section, f"unknown section [{section}]"))
    for section, keys in SCHEMA.items():
        values = {k: default for k, (_, default) in keys.items()}
        if cp.has_section(section):
            for key in REQUIRED_IF_PRESENT.get(section, ()):
                if key not in cp[section]:
                    errors.append((f"{section}.{key}", f"missing required key [{section}].{key}"))
            for key, raw in cp[section].items():
                if key not in keys:
                    errors.append((f"{section}.{key}", f"unknown key [{section}].{key}"))
                    continue
                try:
                    values[key] = keys[key][0](raw)
                except ValueError:
                    errors.append((f"{section}.{key}", f"cannot parse {raw!r} for [{section}].{key}"))
        resolved[section] = values
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            errors.append((dotted, f"unknown override {dotted}"))
        elif value is not None:
            resolved[section][key] = value

    objects = {}
    for name, build in (("grid", lambda v: SimGrid(**v)),
                        ("feature", lambda v: SpectralFeature(**v)),
                        ("gradient", lambda v: StarkGradient(**v)),
                        ("pulse", lambda v: PulseSpec(**v))):
        try:
            objects[name] = build(resolved[name])
        except ConfigError as exc:
            errors.append((exc.key or name, str(exc)))
        except TypeError as exc:
            errors.append((name, str(exc)))
    cpl = resolved["coupling"]
    if cpl["eta"] is not None and cpl["eta"] < 0:
        errors.append(("coupling.eta", "coupling.eta must be >= 0"))
    if cpl["homogeneous_T2"] is not None and not cpl["homogeneous_T2"] > 0:
        errors.append(("coupling.homogeneous_T2", "homogeneous_T2 must be positive"))
    try:
        resolved["run"]["mode"] = normalize_mode(resolved["run"]["mode"])
    except ModeMismatch as exc:
        errors.append(("run.mode", str(exc)))
    if resolved["run"]["workers"] < 1:
        errors.append(("run.workers", "workers must be >= 1"))
    if {"grid", "feature", "gradient"} <= objects.keys():
        try:
            build_medium(objects["grid"], objects["feature"], objects["gradient"])
        except ConfigError as exc:
            errors.append((exc.key or "grid", str(exc)))
    if errors:
        return None, errors

    g = objects["gradient"]
    grid = objects["grid"]
    resolved["derived"] = {
        "stark_half_width_khz": g.half_width_khz,
        "broadened_span_khz": 2.0 * g.half_width_khz if g.is_on else 0.0,
        "length_mm": grid.length,
        "max_t_step_us": grid.max_t_step,
    }
    return resolved, []


def format_errors(errors) -> str:
    return "\n".join(f"config error [{key}]: {msg}" for key, msg in errors)


def load_config(text: str, overrides: dict | None = None) -> dict:
    """Like :func:`validate_config` but raises :class:`ConfigError` naming
    the first offending key."""
    resolved, errors = validate_config(text, overrides)
    if errors:
        raise ConfigError(format_errors(errors), errors[0][0])
    return resolved


def config_hash(resolved: dict) -> str:
    payload = json.dumps(resolved, sort_keys=True, default=repr)
    return hashlib.sha256(payload.encode()).hexdigest()


def medium_from_config(resolved: dict) -> MediumSpec:
    """Calibrated medium with the configured gradient applied."""
    grid = SimGrid(**resolved["grid"])
    feature = SpectralFeature(**resolved["feature"])
    gradient = StarkGradient(**resolved["gradient"])
    medium = build_medium(grid, feature, gradient)
    cpl = resolved["coupling"]
    medium = replace(medium, homogeneous_t2=cpl["homogeneous_T2"])
    if cpl["eta"] is None:
        return calibrate_coupling(medium, feature.peak_optical_depth)
    return replace(medium, coupling=cpl["eta"])


def pulse_from_config(resolved: dict) -> PulseSpec:
    return PulseSpec(**resolved["pulse"])
