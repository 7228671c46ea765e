#!/usr/bin/env python3
"""
Tests for experiment dispatch, output emission, figure commands and the CLI.
"""

import json
import os

import pytest

import config
from dnpr import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from errors import ConfigurationError, OutputError
from figures import FIGURES, figure_command
from runconfig import parse_config
from runner import ExperimentRunner, read_rate_curve


def make_runner(body: str, seed: int = 5) -> ExperimentRunner:
    return ExperimentRunner(parse_config(f"schema_version = 1\nseed = {seed}\n{body}"))


def run_to(body: str, path: str, fmt: str = "csv") -> list:
    runner = make_runner(body)
    runner.config = runner.config.with_overrides(out=path, fmt=fmt)
    return runner.write(runner.run())


THERMAL = '[experiment]\nkind = "thermal"\n'
MATCHING = '[experiment]\nkind = "matching-field"\n\n[scan]\nthetas = [0.0, 10.0, 20.0]\n'


def test_thermal_run_reports_quantities_and_warning():
    envelope = make_runner(THERMAL).run()
    assert envelope.data.columns == ["quantity", "value", "unit"]
    values = {row[0]: row[1] for row in envelope.data.rows}
    assert values["p_thermal"] == pytest.approx(7.709e-6, rel=0.01)
    assert values["sensitivity_gain"] == pytest.approx(329, abs=1)
    assert any("differs" in message for message in envelope.warnings)


@pytest.mark.parametrize("body", [THERMAL, MATCHING])
def test_repeated_runs_are_byte_identical(tmp_path, body):
    first = tmp_path / "first.csv"
    second = tmp_path / "second.csv"
    written = run_to(body, str(first))
    run_to(body, str(second))

    assert written == [str(first), f"{first}.meta.json"]
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "first.csv.meta.json").read_bytes() == (tmp_path / "second.csv.meta.json").read_bytes()


def test_matching_field_table():
    envelope = make_runner(MATCHING).run()
    assert envelope.data.columns == ["theta_deg", "B_m_mT"]
    assert envelope.data.rows[0][1] == pytest.approx(51.2045, abs=1e-3)
    assert envelope.data.rows[2][1] > envelope.data.rows[1][1]


def test_sidecar_metadata(tmp_path):
    path = tmp_path / "levels.csv"
    body = '[experiment]\nkind = "levels"\n\n[scan]\nn_points = 11\n'
    run_to(body, str(path))
    meta = json.loads((tmp_path / "levels.csv.meta.json").read_text())
    assert meta["seed"] == 5
    assert meta["tool_version"] == config.TOOL_VERSION
    assert meta["kind"] == "levels"
    assert len(meta["spec_hash"]) == 16
    assert meta["preset_geometry"]["d_nv_p1_MHz"] == 0.5
    assert "wall_time_s" not in meta
    lines = path.read_text().splitlines()
    assert lines[0].startswith("B_mT,level_0_MHz")
    assert len(lines) == 12


def test_json_envelope_round_trips_config(tmp_path):
    path = tmp_path / "thermal.json"
    run_to(THERMAL, str(path), fmt="json")
    envelope = json.loads(path.read_text())
    assert set(envelope) >= {"config", "config_hash", "tool_version", "wall_time_s", "data", "warnings"}
    reparsed = parse_config(envelope["config"])
    assert reparsed.config_hash == envelope["config_hash"]
    assert reparsed.kind == "thermal"
    assert not os.path.exists(f"{path}.meta.json")


def test_missing_output_directory_leaves_no_file(tmp_path):
    target = tmp_path / "missing" / "out.csv"
    with pytest.raises(OutputError):
        run_to(THERMAL, str(target))
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_rate_scan_has_one_row_per_rate():
    body = '[experiment]\nkind = "rate-scan"\n\n[scan]\nrates = [0.2, 0.5, 1.0, 5.0, 20.0]\n'
    envelope = make_runner(body).run()
    assert envelope.data.columns == ["rate_mT_per_ms", "P"]
    assert [row[0] for row in envelope.data.rows] == [0.2, 0.5, 1.0, 5.0, 20.0]


def test_read_rate_curve(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("rate_mT_per_ms,amplitude\n0.5,2.0\n0.1,1.0\n1.0,1.5\n2.0,0.5\n")
    curve = read_rate_curve(str(path))
    assert curve.rates == (0.1, 0.5, 1.0, 2.0)
    assert curve.values == (1.0, 2.0, 1.5, 0.5)

    bad = tmp_path / "bad.csv"
    bad.write_text("rate,value\n0.1,1.0\n")
    with pytest.raises(ConfigurationError):
        read_rate_curve(str(bad))


def test_unknown_figure_lists_names(tmp_path):
    with pytest.raises(ConfigurationError) as excinfo:
        figure_command("fig9z", str(tmp_path))
    for name in FIGURES:
        assert name in str(excinfo.value)


def test_matching_figure_is_reproducible(tmp_path):
    first_dir = tmp_path / "a"
    second_dir = tmp_path / "b"
    first_dir.mkdir()
    second_dir.mkdir()
    first = figure_command("fig5d", str(first_dir))
    figure_command("fig5d", str(second_dir))

    assert [os.path.basename(p) for p in first] == [
        "fig5d_matching.csv",
        "fig5d_matching.csv.meta.json",
        "fig5d_cone.csv",
        "fig5d_cone.csv.meta.json",
    ]
    for name in ("fig5d_matching.csv", "fig5d_cone.csv"):
        assert (first_dir / name).read_bytes() == (second_dir / name).read_bytes()
    rows = (first_dir / "fig5d_matching.csv").read_text().splitlines()
    assert rows[0] == "theta_deg,B_m_mT"
    assert len(rows) == 10


def test_cli_success(tmp_path):
    out = tmp_path / "thermal.csv"
    assert main(["thermal", "--out", str(out), "--seed", "3"]) == EXIT_OK
    assert out.exists()
    meta = json.loads((tmp_path / "thermal.csv.meta.json").read_text())
    assert meta["seed"] == 3


def test_cli_validate(tmp_path, capsys):
    path = tmp_path / "run.toml"
    path.write_text('schema_version = 1\nseed = 4\n[experiment]\nkind = "levels"\n')
    assert main(["validate", "--config", str(path)]) == EXIT_OK
    assert "seed = 4" in capsys.readouterr().out


def test_cli_config_error(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('schema_version = 1\n[experiment]\nkind = "levels"\n[system]\ntheta = 95.0\n')
    assert main(["levels", "--config", str(path)]) == EXIT_CONFIG


def test_cli_runtime_error(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'schema_version = 1\nseed = 1\n[experiment]\nkind = "fit"\n'
        "[fit]\nrates = [0.1, 0.2, 0.5, 1.0]\nvalues = [0.0, 0.0, 0.0, 0.0]\n"
    )
    assert main(["fit", "--config", str(path), "--out", str(tmp_path / "fit.csv")]) == EXIT_RUNTIME
    assert not (tmp_path / "fit.csv").exists()


def test_cli_io_error(tmp_path):
    assert main(["thermal", "--out", str(tmp_path / "missing" / "out.csv")]) == EXIT_IO
    assert main(["levels", "--config", str(tmp_path / "absent.toml")]) == EXIT_IO
