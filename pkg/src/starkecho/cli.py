"""Command-line front end.

Each subcommand resolves the configuration (file, then flags), runs one
protocol or analysis operation and writes CSV/JSON artifacts plus a
``manifest.json``. Exit status: 0 success, 2 configuration error, 1 solver
error. ``STARKECHO_OUTPUT_DIR`` sets the output directory when
``--out-dir`` is not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .analysis import EchoExperiment, SweepSpec, run_sweep
from .config import config_hash, format_errors, medium_from_config, pulse_from_config, validate_config
from .errors import ConfigError, StarkEchoError
from .model import probe_transmission, with_gradient
from .protocol import ONE_OVER_E2, run_backward_crib, run_fid, run_forward_echo, time_bandwidth_product

OUTPUT_ENV = "STARKECHO_OUTPUT_DIR"
DEFAULT_OUTPUT = "starkecho_out"


def parse_range(text: str):
    """``start:stop:count`` (inclusive, evenly spaced) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise argparse.ArgumentTypeError("count must be >= 1")
        return [float(v) for v in np.linspace(start, stop, count)]
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("--voltage", type=float, help="electrode voltage magnitude (V)")
    common.add_argument("--polarity", type=int, choices=(-1, 0, 1))
    common.add_argument("--mode", help="linearized or full-bloch")
    common.add_argument("--n-z", type=int, dest="n_z")
    common.add_argument("--n-detune", type=int, dest="n_detune")
    common.add_argument("--t-step", type=float, dest="t_step", help="time step (us)")
    common.add_argument("--record-until", type=float, dest="record_until", help="record length (us)")
    common.add_argument("--pulse-duration", type=float, dest="pulse_duration", help="us")
    common.add_argument("--pulse-area", type=float, dest="pulse_area", help="rad")
    common.add_argument("--pulse-shape", dest="pulse_shape")
    common.add_argument("--no-manifest", action="store_true", help="skip manifest.json")

    p = argparse.ArgumentParser(prog="starkecho", description="Stark-echo light-matter simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fid", parents=[common], help="free induction decay after one pulse")
    sub.add_parser("broaden", parents=[common], help="broadened-line summary and FID with gradient")
    echo = sub.add_parser("echo", parents=[common], help="forward Stark echo")
    echo.add_argument("--tau-us", type=float, dest="tau")
    crib = sub.add_parser("crib-backward", parents=[common], help="backward retrieval with phase matching")
    crib.add_argument("--tau-us", type=float, dest="tau")
    sd = sub.add_parser("sweep-delay", parents=[common], help="echo intensity against flip delay")
    sd.add_argument("--taus", type=parse_range, default=[3.0, 6.0, 9.0, 12.0, 15.0],
                    help="start:stop:count or comma list (us)")
    sd.add_argument("--workers", type=int)
    sa = sub.add_parser("sweep-area", parents=[common], help="echo energy against input pulse area")
    sa.add_argument("--areas", type=parse_range, default=parse_range("0.05:1.571:20"),
                    help="start:stop:count or comma list (rad)")
    sa.add_argument("--tau-us", type=float, dest="tau")
    sa.add_argument("--workers", type=int)
    sub.add_parser("calibrate", parents=[common], help="calibrate the coupling and verify with a probe")
    return p


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "gradient.voltage": get("voltage"),
        "gradient.polarity": get("polarity"),
        "run.mode": get("mode"),
        "run.tau": get("tau"),
        "run.record_until": get("record_until"),
        "run.workers": get("workers"),
        "grid.n_z": get("n_z"),
        "grid.n_detune": get("n_detune"),
        "grid.t_step": get("t_step"),
        "pulse.duration": get("pulse_duration"),
        "pulse.area": get("pulse_area"),
        "pulse.shape": get("pulse_shape"),
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False, default=repr) + "\n")


class Run:
    """Collects outputs for one command and writes the manifest."""

    def __init__(self, command: str, resolved: dict, out_dir: Path):
        self.command = command
        self.resolved = resolved
        self.out_dir = out_dir
        self.outputs = []
        self.hash = config_hash(resolved)
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(str(p))
        return p

    def meta(self) -> dict:
        return {"config_hash": self.hash, "command": self.command}

    def manifest(self, wall_time: float) -> None:
        g = self.resolved["grid"]
        _write_json(self.out_dir / "manifest.json", {
            "config_hash": self.hash,
            "command": self.command,
            "outputs": self.outputs,
            "wall_time": wall_time,
            "solver_resolution": [g["n_z"], g["n_detune"], g["t_step"]],
            "resolved_config": self.resolved,
        })


def cmd_fid(run: Run, cfg: dict) -> None:
    medium = medium_from_config(cfg)
    pulse = pulse_from_config(cfg)
    trace = run_fid(medium, pulse, cfg["run"]["mode"], record_until=cfg["run"]["record_until"])
    trace.to_csv(run.path("fid.csv"), run.meta())


def cmd_broaden(run: Run, cfg: dict) -> None:
    medium = medium_from_config(cfg)
    off = with_gradient(medium, voltage=0.0)
    summary = {
        "stark_half_width_khz": medium.gradient.half_width_khz,
        "broadened_span_khz": medium.broadened_span_khz,
        "broadened_width_khz": medium.broadened_width_khz,
        "absorption_gradient_off": off.resonant_absorption(),
        "absorption_gradient_on": medium.resonant_absorption(),
        "optical_depth_gradient_on": float(medium.optical_depth(medium.feature.center)),
        "coupling_per_mm": medium.coupling,
    }
    _write_json(run.path("broaden.json"), summary)
    pulse = pulse_from_config(cfg)
    trace = run_fid(medium, pulse, cfg["run"]["mode"], record_until=cfg["run"]["record_until"])
    trace.to_csv(run.path("fid_broadened.csv"), run.meta())


def _echo_like(run: Run, cfg: dict, fn, stem: str) -> None:
    medium = medium_from_config(cfg)
    pulse = pulse_from_config(cfg)
    trace, metrics = fn(medium, pulse, cfg["run"]["tau"], cfg["run"]["mode"],
                        record_until=cfg["run"]["record_until"])
    trace.to_csv(run.path(f"{stem}_trace.csv"), run.meta())
    _write_json(run.path(f"{stem}_metrics.json"), metrics.to_dict())


def cmd_echo(run: Run, cfg: dict) -> None:
    _echo_like(run, cfg, run_forward_echo, "echo")


def cmd_crib(run: Run, cfg: dict) -> None:
    _echo_like(run, cfg, run_backward_crib, "crib")


def _experiment(cfg: dict) -> EchoExperiment:
    return EchoExperiment(medium=medium_from_config(cfg), pulse=pulse_from_config(cfg),
                          tau=cfg["run"]["tau"], mode=cfg["run"]["mode"])


def cmd_sweep_delay(run: Run, cfg: dict, taus) -> None:
    spec = SweepSpec("tau", taus, _experiment(cfg),
                     outputs=("peak_time_us", "echo_energy", "echo_intensity",
                              "fid_intensity_at_2tau", "ratio"),
                     workers=cfg["run"]["workers"])
    table = run_sweep(spec)
    table.to_csv(run.path("sweep_delay.csv"))
    ok = [i for i, r in enumerate(table.rows) if not r[-1]]
    if len(ok) >= 2:
        delays = table.column("total_delay")[ok]
        intens = table.column("echo_intensity")[ok]
        tbp, window, i0 = time_bandwidth_product(delays, intens, spec.base.pulse.duration)
        _write_json(run.path("tbp.json"), {"tbp": tbp, "window_us": window,
                                           "threshold": ONE_OVER_E2, "zero_delay_intensity": i0})


def cmd_sweep_area(run: Run, cfg: dict, areas) -> None:
    spec = SweepSpec("input_area", areas, _experiment(cfg),
                     outputs=("input_energy", "echo_energy", "efficiency", "peak_time_us"),
                     workers=cfg["run"]["workers"])
    run_sweep(spec).to_csv(run.path("sweep_area.csv"))


def cmd_calibrate(run: Run, cfg: dict) -> None:
    medium = medium_from_config(cfg)
    off = with_gradient(medium, voltage=0.0)
    _write_json(run.path("calibration.json"), {
        "coupling_per_mm": medium.coupling,
        "target_peak_optical_depth": medium.feature.peak_optical_depth,
        "probe_transmission": probe_transmission(off),
        "target_transmission": float(np.exp(-medium.feature.peak_optical_depth)),
        "absorption_gradient_on": medium.resonant_absorption(),
    })


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            print(f"config error [config]: {exc}", file=sys.stderr)
            return 2
    resolved, errors = validate_config(text, _overrides(args))
    if errors:
        print(format_errors(errors), file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    extra = {}
    if args.command == "sweep-delay":
        extra["taus"] = args.taus
    elif args.command == "sweep-area":
        extra["areas"] = args.areas
    resolved["command_args"] = {"command": args.command, **extra}
    run = Run(args.command, resolved, out_dir)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "fid":
                cmd_fid(run, resolved)
            elif args.command == "broaden":
                cmd_broaden(run, resolved)
            elif args.command == "echo":
                cmd_echo(run, resolved)
            elif args.command == "crib-backward":
                cmd_crib(run, resolved)
            elif args.command == "sweep-delay":
                cmd_sweep_delay(run, resolved, args.taus)
            elif args.command == "sweep-area":
                cmd_sweep_area(run, resolved, args.areas)
            elif args.command == "calibrate":
                cmd_calibrate(run, resolved)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except (StarkEchoError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not args.no_manifest:
        run.manifest(time.perf_counter() - t0)
    for p in run.outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
