import csv
import json

import pytest

from starkecho.cli import main, parse_range
from starkecho.config import load_config, validate_config
from starkecho.errors import ConfigError


def keys(errors):
    return [k for k, _ in errors]


def test_defaults_are_documented_values():
    cfg, errors = validate_config("")
    assert errors == []
    assert cfg["feature"]["shape"] == "top_hat"
    assert cfg["feature"]["width"] == 25.0
    assert cfg["feature"]["peak_optical_depth"] == pytest.approx(0.51, abs=0.005)
    assert cfg["gradient"]["broadening_rate"] == 42.0
    assert cfg["grid"]["z_max"] - cfg["grid"]["z_min"] == 4.0


def test_missing_feature_width_named():
    _, errors = validate_config("[feature]\nshape = top_hat\n")
    assert "feature.width" in keys(errors)


def test_resolved_stark_half_width():
    cfg, errors = validate_config("[gradient]\nvoltage = 25\nbroadening_rate = 42\n")
    assert errors == []
    assert cfg["derived"]["stark_half_width_khz"] == pytest.approx(1050.0)


def test_cfl_violation_suggests_bound():
    _, errors = validate_config("[grid]\nc_medium = 1.0\nt_step = 0.05\n")
    (key, msg), = [e for e in errors if e[0] == "grid.t_step"]
    assert "0.0201" in msg


def test_errors_are_aggregated():
    text = "[grid]\nn_z = 1\nfoo = 2\n[gradient]\npolarity = 3\n[extra]\na = 1\n"
    _, errors = validate_config(text)
    assert {"grid.n_z", "grid.foo", "gradient.polarity", "extra"} <= set(keys(errors))


def test_bad_number_and_mode():
    _, errors = validate_config("[pulse]\narea = lots\n[run]\nmode = quantum\n")
    assert {"pulse.area", "run.mode"} <= set(keys(errors))


def test_load_config_raises_with_key():
    with pytest.raises(ConfigError) as exc:
        load_config("[feature]\nwidth = -3\n")
    assert exc.value.key == "feature.width"


def test_parse_range():
    assert parse_range("0:1:3") == [0.0, 0.5, 1.0]
    assert parse_range("3,6,9") == [3.0, 6.0, 9.0]


def read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return rows[0], rows[1:]


def test_fid_command(tmp_path, capsys):
    assert main(["fid", "--voltage", "0", "--out-dir", str(tmp_path), "--record-until", "30"]) == 0
    header, rows = read_csv(tmp_path / "fid.csv")
    assert header == ["t_us", "in_re", "in_im", "out_re", "out_im", "out_abs"]
    assert len(rows) == 1501
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "fid"
    assert manifest["solver_resolution"] == [200, 256, 0.02]
    for p in manifest["outputs"]:
        assert (tmp_path / p.split("/")[-1]).exists()


def test_echo_command(tmp_path):
    assert main(["echo", "--tau-us", "10", "--voltage", "25", "--out-dir", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "echo_metrics.json").read_text())
    assert list(metrics) == ["peak_time_us", "echo_energy", "efficiency", "fidelity", "tbp"]
    # default 1 us pulse starts at 1 us; echo 20 us after its centre
    assert metrics["peak_time_us"] == pytest.approx(21.5, abs=0.02)


def test_outputs_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["echo", "--tau-us", "4", "--voltage", "25", "--n-z", "60", "--n-detune", "64"]
    assert main(argv + ["--out-dir", str(a)]) == 0
    assert main(argv + ["--out-dir", str(b)]) == 0
    for name in ("echo_trace.csv", "echo_metrics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]


def test_sweep_area_full_bloch(tmp_path):
    argv = ["sweep-area", "--mode", "full-bloch", "--areas", "0.05:0.3:3", "--voltage", "25",
            "--n-z", "40", "--n-detune", "64", "--tau-us", "4", "--out-dir", str(tmp_path)]
    assert main(argv) == 0
    header, rows = read_csv(tmp_path / "sweep_area.csv")
    assert header == ["input_area", "input_energy", "echo_energy", "efficiency", "peak_time_us", "error"]
    assert len(rows) == 3 and all(r[-1] == "" for r in rows)


def test_sweep_delay_writes_tbp(tmp_path):
    argv = ["sweep-delay", "--taus", "2:20:4", "--voltage", "25", "--n-z", "60", "--n-detune", "64",
            "--out-dir", str(tmp_path)]
    assert main(argv) == 0
    header, rows = read_csv(tmp_path / "sweep_delay.csv")
    assert header[:2] == ["tau", "total_delay"] and "ratio" in header
    tbp = json.loads((tmp_path / "tbp.json").read_text())
    assert tbp["threshold"] == pytest.approx(0.1353352832366127)


def test_broaden_and_calibrate(tmp_path):
    assert main(["broaden", "--voltage", "25", "--record-until", "10", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "broaden.json").read_text())
    assert summary["broadened_span_khz"] == pytest.approx(2100.0)
    assert summary["absorption_gradient_on"] < 0.015
    assert main(["calibrate", "--out-dir", str(tmp_path)]) == 0
    cal = json.loads((tmp_path / "calibration.json").read_text())
    assert cal["probe_transmission"] == pytest.approx(0.6, abs=0.003)


def test_crib_command(tmp_path):
    argv = ["crib-backward", "--tau-us", "3", "--voltage", "25", "--pulse-shape", "ramp",
            "--pulse-duration", "2", "--out-dir", str(tmp_path)]
    assert main(argv) == 0
    assert (tmp_path / "crib_metrics.json").exists()


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("STARKECHO_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["calibrate", "--no-manifest"]) == 0
    assert (tmp_path / "env" / "calibration.json").exists()
    assert not (tmp_path / "env" / "manifest.json").exists()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[feature]\nshape = top_hat\n")
    assert main(["fid", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "feature.width" in capsys.readouterr().err
    assert main(["fid", "--config", str(tmp_path / "missing.cfg")]) == 2
    # flip before the pulse has ended
    assert main(["echo", "--tau-us", "0.1", "--voltage", "25", "--out-dir", str(tmp_path)]) == 1


def test_inline_comments_allowed():
    cfg, errors = validate_config("[feature]\nwidth = 30.0   ; kHz\nshape = top_hat # full width\n")
    assert errors == []
    assert cfg["feature"]["width"] == 30.0
