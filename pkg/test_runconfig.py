#!/usr/bin/env python3
"""
Tests for TOML run-configuration parsing, validation and canonical dumps.
"""

import pytest

import config
from errors import ConfigParseError, ConfigValidationError, SchemaVersionError
from runconfig import build_ensemble, build_protocol, build_system, dump_config, parse_config

MINIMAL_LEVELS = """
schema_version = 1
seed = 7

[experiment]
kind = "levels"
"""


def test_minimal_config_fills_defaults():
    run_config = parse_config(MINIMAL_LEVELS)
    assert run_config.kind == "levels"
    assert run_config.seed == 7
    assert run_config.get("system.preset") == "trio"
    assert run_config.get("system.d_nv_p1") == config.D_NV_P1
    assert run_config.get("scan.n_points") == 201
    assert run_config.output_format == "csv"
    assert run_config.output_path is None
    assert build_system(run_config).dim == 12


def test_unknown_key_suggests_nearest():
    text = MINIMAL_LEVELS + "\n[sweeep]\nrate = 0.26\n"
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(text)
    assert excinfo.value.key_path == "sweeep"
    assert "sweep" in str(excinfo.value)
    assert "did you mean" in str(excinfo.value)


def test_unknown_nested_key_reports_path():
    text = MINIMAL_LEVELS + "\n[system]\nthetta = 5.0\n"
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(text)
    assert excinfo.value.key_path == "system.thetta"
    assert "theta" in str(excinfo.value)


def test_theta_out_of_range():
    text = MINIMAL_LEVELS + "\n[system]\ntheta = 95.0\n"
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(text)
    assert excinfo.value.key_path == "system.theta"
    assert "[0, 90]" in str(excinfo.value)


def test_parse_error_has_line_and_column():
    text = 'schema_version = 1\n[experiment]\nkind = "levels\n'
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config(text)
    assert excinfo.value.line == 3
    assert excinfo.value.column is not None


def test_schema_version_mismatch():
    with pytest.raises(SchemaVersionError):
        parse_config(MINIMAL_LEVELS.replace("schema_version = 1", "schema_version = 2"))


def test_schema_version_required():
    with pytest.raises(ConfigValidationError):
        parse_config('[experiment]\nkind = "levels"\n')


def test_kind_conflict_with_command():
    with pytest.raises(ConfigValidationError):
        parse_config(MINIMAL_LEVELS, kind="sweep")
    assert parse_config('schema_version = 1\nseed = 1\n', kind="thermal").kind == "thermal"


def test_missing_seed_is_generated():
    run_config = parse_config('schema_version = 1\n[experiment]\nkind = "thermal"\n')
    assert run_config.seed_generated
    assert 0 <= run_config.seed < 2 ** 63
    assert f"seed = {run_config.seed}" in dump_config(run_config)


def test_seed_validation():
    with pytest.raises(ConfigValidationError):
        parse_config(MINIMAL_LEVELS.replace("seed = 7", "seed = -1"))


def test_dump_round_trip():
    text = MINIMAL_LEVELS + '\n[system]\npreset = "quartet"\ntheta = 12.5\n\n[scan]\nrates = [0.1, 1, 10]\n'
    run_config = parse_config(text)
    assert run_config.get("scan.rates") == (0.1, 1.0, 10.0)
    again = parse_config(dump_config(run_config))
    assert again == run_config
    assert again.config_hash == run_config.config_hash


def test_overrides():
    run_config = parse_config(MINIMAL_LEVELS).with_overrides(seed=99, out="out.csv", fmt="json")
    assert run_config.seed == 99
    assert run_config.output_path == "out.csv"
    assert run_config.output_format == "json"
    with pytest.raises(ConfigValidationError):
        parse_config(MINIMAL_LEVELS).with_overrides(fmt="xml")


def test_builders_use_config_values():
    text = """
schema_version = 1
seed = 3

[experiment]
kind = "buildup"

[sweep]
delta_b = 6.0
t_lh = 10.0
t_hl = 10.3

[geometry]
p1_ppm = 20.0
nv_ppm = 4.0
"""
    run_config = parse_config(text)
    protocol = build_protocol(run_config)
    assert protocol.sweep.period == pytest.approx(20.3)
    assert protocol.sweep.b_center == pytest.approx(config.NV_ZERO_FIELD / (2 * abs(config.GAMMA_E)))
    ensemble = build_ensemble(run_config)
    assert ensemble.p1_ppm == 20.0
    assert ensemble.seed == 3


def test_secular_p1_hyperfine_option():
    text = MINIMAL_LEVELS + '\n[system]\npreset = "quartet"\np1_secular = true\n'
    system = build_system(parse_config(text))
    assert system.dim == 36
    assert any(abs(c.matrix[0, 0]) < 1e-12 and c.matrix[2, 2] == config.P1_N14_A_PAR for c in system.couplings)
    assert parse_config(MINIMAL_LEVELS).get("system.p1_secular") is False


def test_fit_needs_data_source():
    with pytest.raises(ConfigValidationError):
        parse_config('schema_version = 1\nseed = 1\n[experiment]\nkind = "fit"\n')


def test_invalid_protocol_reported_as_validation_error():
    text = MINIMAL_LEVELS.replace('"levels"', '"buildup"') + "\n[protocol]\nt_p = 1.0\n"
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(text)
    assert excinfo.value.key_path == "protocol"


@pytest.mark.parametrize("value", ["", "0", "-3", "four", "2.5"])
def test_thread_count_falls_back_to_cpu_count(value, monkeypatch):
    monkeypatch.setattr(config.os, "cpu_count", lambda: 6)
    assert config.parse_threads(value) == 6


def test_thread_count_reads_positive_integer():
    assert config.parse_threads("3") == 3


def test_invalid_thread_count_logs_warning(caplog):
    with caplog.at_level("WARNING"):
        config.parse_threads("many")
    assert "DNPR_THREADS" in caplog.text
