"""
Run configuration: TOML schema, validation and builders for the module specs.

A config is a TOML document with `schema_version`, an optional top-level
`seed`, an `[experiment]` table naming the kind, and optional tables for the
system, sweep, pump, protocol, dynamics, scan, geometry, fit, thermal and
output settings. Unknown keys are rejected.
"""

import dataclasses
import difflib
import json
import logging
import math
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

import config
from dynamics import FieldSweepSpec, ProtocolSpec, PumpSpec
from errors import (
    ConfigParseError,
    ConfigurationError,
    ConfigValidationError,
    SchemaVersionError,
)
from geometry import ClusterRule, DefectEnsembleSpec
from lzmodel import LZParams, RateCurve
from spinsys import SpinSystemSpec, cluster_system, lone_nv, lone_p1
from utils import bytes_hash

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "levels",
    "crossings",
    "matching-field",
    "orientation-cone",
    "sweep",
    "rate-scan",
    "fraction-scan",
    "buildup",
    "dnp-spectrum",
    "range-scan",
    "geometry",
    "fit",
    "thermal",
)
SYSTEM_PRESETS = ("trio", "quartet", "full", "pair-nitrogens", "lone-nv", "lone-p1")
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class Key:
    kind: str
    default: Any = None
    choices: Optional[Tuple[Any, ...]] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    positive: bool = False


SCHEMA: Dict[str, Dict[str, Key]] = {
    "experiment": {
        "kind": Key("str", None, EXPERIMENT_KINDS),
    },
    "system": {
        "preset": Key("str", "trio", SYSTEM_PRESETS),
        "d_nv_p1": Key("float", config.D_NV_P1, positive=True),
        "d_nv_c": Key("float", config.D_NV_C, positive=True),
        "theta": Key("float", 0.0, lo=0.0, hi=90.0),
        "phi": Key("float", 0.0, lo=-360.0, hi=360.0),
        "nv_p1_angle": Key("float", config.TRIO_NV_P1_ANGLE_DEG, lo=0.0, hi=180.0),
        "nv_c_angle": Key("float", config.TRIO_NV_C_ANGLE_DEG, lo=0.0, hi=180.0),
        "carbon_partner": Key("str", "nv", ("nv", "p1")),
        "p1_a_par": Key("float", config.P1_N14_A_PAR),
        "p1_a_perp": Key("float", config.P1_N14_A_PERP),
        "nv_a_iso": Key("float", config.NV_N14_A_ISO),
        "quadrupole": Key("float", config.N14_QUADRUPOLE),
        "p1_secular": Key("bool", False),
    },
    "scan": {
        "b_min": Key("float", None, lo=0.0),
        "b_max": Key("float", None, lo=0.0),
        "n_points": Key("int", 201, lo=2),
        "resolution": Key("float", config.CROSSING_SCAN_RESOLUTION_MT, positive=True, hi=config.CROSSING_SCAN_RESOLUTION_MT),
        "with_vectors": Key("bool", False),
        "track": Key("bool", False),
        "rates": Key("floats", (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)),
        "direction": Key("str", "up", ("up", "down")),
        "fractions": Key("floats", (1 / 11, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 10 / 11)),
        "fields": Key("floats", None),
        "refine_motifs": Key("bool", False),
        "ranges": Key("floats", (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0)),
        "b_start": Key("float", None, lo=0.0),
        "n_cycles": Key("int", 3, lo=1),
        "thetas": Key("floats", (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)),
        "delta_bs": Key("floats", (config.FIG5_SWEEP_RANGE_MT,)),
        "window_half_width": Key("float", config.SWEEP_HALF_WINDOW_MT, positive=True),
    },
    "sweep": {
        "b_center": Key("float", None, lo=0.0),
        "delta_b": Key("float", config.SWEEP_RANGE_MT, positive=True),
        "t_lh": Key("float", config.CYCLE_PERIOD_MS * 10 / 11, positive=True),
        "t_hl": Key("float", config.CYCLE_PERIOD_MS / 11, positive=True),
        "n_cycles": Key("int", 1, lo=1),
        "start_direction": Key("str", "up", ("up", "down")),
        "rate": Key("float", 0.26, positive=True),
        "direction": Key("str", "up", ("up", "down")),
    },
    "pump": {
        "enabled": Key("bool", False),
        "mode": Key("str", "stroboscopic", ("stroboscopic", "continuous")),
        "reset_interval": Key("float", config.RESET_INTERVAL_MS, positive=True),
        "pump_rate": Key("float", None, positive=True),
        "pulse_gate": Key("float", None, positive=True),
    },
    "protocol": {
        "t_p": Key("float", config.PUMP_TIME_MS, positive=True),
        "t1n": Key("float", config.T1N_MS, positive=True),
        "p_sat": Key("float", config.P_SAT, positive=True),
        "dilution": Key("float", config.INJECTION_DILUTION, positive=True, hi=1.0),
    },
    "dynamics": {
        "step_tolerance": Key("float", config.STEP_TOLERANCE, positive=True),
        "tau_evol": Key("float", config.TAU_EVOL_MS, positive=True),
        "pump_cycles": Key("int", config.PUMP_CYCLES, lo=1),
    },
    "geometry": {
        "statistic": Key("str", "distance", ("distance", "coupling", "cluster", "curve")),
        "p1_ppm": Key("float", 50.0, positive=True),
        "nv_ppm": Key("float", 10.0, positive=True),
        "box_edge": Key("float", None, positive=True),
        "target_count": Key("int", None, lo=2),
        "placement": Key("str", "continuum", ("continuum", "lattice")),
        "n_samples": Key("int", 10000, lo=1000),
        "bin_width": Key("float", 0.1, positive=True, hi=0.2),
        "n_realizations": Key("int", 1000, lo=1000),
        "threshold_fraction": Key("float", config.CLUSTER_THRESHOLD_FRACTION, positive=True, hi=1.0),
        "coupling_floor": Key("float", config.CLUSTER_COUPLING_FLOOR_MHZ, lo=0.0),
        "pairs": Key("str", "all", ("all", "nv_p1")),
        "ppm_list": Key("floats", (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0)),
        "ratio": Key("float", 5.0, positive=True),
    },
    "fit": {
        "data": Key("str", None),
        "rates": Key("floats", None),
        "values": Key("floats", None),
        "sigma": Key("floats", None),
        "synthetic": Key("bool", False),
        "delta0": Key("float", 250.0, positive=True),
        "delta1": Key("float", 30.0, positive=True),
        "k": Key("float", 15.0, positive=True),
        "p_m": Key("float", 13.0),
        "noise": Key("float", 0.0, lo=0.0),
        "n_points": Key("int", 20, lo=4),
        "rate_min": Key("float", 0.01, positive=True),
        "rate_max": Key("float", 2.5, positive=True),
        "multistart": Key("int", 27, lo=1),
    },
    "thermal": {
        "field_t": Key("float", 9.0),
        "temperature_k": Key("float", 300.0, positive=True),
        "gamma_mhz_per_t": Key("float", config.GAMMA_C13_MHZ_PER_T),
        "epsilon": Key("float", 30.0, positive=True),
        "fill_fraction": Key("float", 1 / 50, positive=True, hi=1.0),
        "t_dnp_s": Key("float", 15.0, positive=True),
        "t_thermal_s": Key("float", 1800.0, positive=True),
        "p_thermal": Key("float", None, positive=True),
        "quoted_gain": Key("float", 400.0, positive=True),
    },
    "output": {
        "path": Key("str", None),
        "format": Key("str", "csv", FORMATS),
    },
}
TOP_LEVEL = ("schema_version", "seed")
SEED_LIMIT = 2 ** 63


@dataclass(frozen=True)
class RunConfig:
    schema_version: int
    kind: str
    seed: int
    sections: Dict[str, Dict[str, Any]]
    seed_generated: bool = field(default=False, compare=False)

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections[name]

    def get(self, dotted: str) -> Any:
        table, key = dotted.split(".")
        return self.sections[table][key]

    @property
    def output_path(self) -> Optional[str]:
        return self.sections["output"]["path"]

    @property
    def output_format(self) -> str:
        return self.sections["output"]["format"]

    def canonical_text(self) -> str:
        return dump_config(self)

    @property
    def config_hash(self) -> str:
        return bytes_hash(self.canonical_text().encode("utf-8"))

    def with_overrides(
        self, seed: Optional[int] = None, out: Optional[str] = None, fmt: Optional[str] = None
    ) -> "RunConfig":
        sections = {name: dict(values) for name, values in self.sections.items()}
        if out is not None:
            sections["output"]["path"] = out
        if fmt is not None:
            if fmt not in FORMATS:
                raise ConfigValidationError(f"must be one of {FORMATS}", "output.format")
            sections["output"]["format"] = fmt
        return dataclasses.replace(
            self,
            seed=self.seed if seed is None else _check_seed(seed),
            sections=sections,
            seed_generated=self.seed_generated and seed is None,
        )


def _suggest(name: str, valid) -> str:
    close = difflib.get_close_matches(name, list(valid), n=1)
    return f" (did you mean '{close[0]}'?)" if close else ""


def _check_seed(seed: Any) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < SEED_LIMIT:
        raise ConfigValidationError(f"must be an integer in [0, 2^63), got {seed!r}", "seed")
    return seed


def _coerce(value: Any, spec: Key, path: str) -> Any:
    if spec.kind == "str":
        if not isinstance(value, str):
            raise ConfigValidationError(f"expected a string, got {value!r}", path)
    elif spec.kind == "bool":
        if not isinstance(value, bool):
            raise ConfigValidationError(f"expected true or false, got {value!r}", path)
    elif spec.kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"expected an integer, got {value!r}", path)
    elif spec.kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"expected a number, got {value!r}", path)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigValidationError("must be finite", path)
    elif spec.kind == "floats":
        if not isinstance(value, list) or not value:
            raise ConfigValidationError(f"expected a non-empty list of numbers, got {value!r}", path)
        items = []
        for index, item in enumerate(value):
            items.append(_coerce(item, Key("float", lo=spec.lo, hi=spec.hi, positive=spec.positive), f"{path}[{index}]"))
        return tuple(items)

    if spec.choices is not None and value not in spec.choices:
        raise ConfigValidationError(
            f"{value!r} is not one of {', '.join(str(c) for c in spec.choices)}{_suggest(str(value), [str(c) for c in spec.choices])}",
            path,
        )
    if spec.kind in ("int", "float"):
        if spec.positive and not value > 0:
            raise ConfigValidationError(f"must be positive, got {value}", path)
        if (spec.lo is not None and value < spec.lo) or (spec.hi is not None and value > spec.hi):
            lo = "-inf" if spec.lo is None else f"{spec.lo:g}"
            hi = "inf" if spec.hi is None else f"{spec.hi:g}"
            raise ConfigValidationError(f"{value} outside the allowed range [{lo}, {hi}]", path)
    return value


def _parse_toml(text: str) -> Dict[str, Any]:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+), column (\d+)", str(e))
        line, column = (int(match.group(1)), int(match.group(2))) if match else (None, None)
        raise ConfigParseError(f"invalid TOML: {e}", line, column) from e


def parse_config(text: str, kind: Optional[str] = None, validate_specs: bool = True) -> RunConfig:
    """
    Parse and validate a TOML run configuration.

    Args:
        text: Config text
        kind: Experiment kind implied by the command line, if any
        validate_specs: Build the module specs the kind needs

    Returns:
        RunConfig with every default filled in

    Raises:
        ConfigParseError: Malformed TOML (with line and column)
        ConfigValidationError: Unknown key or invalid value (with key path)
        SchemaVersionError: Unsupported schema_version
    """
    raw = _parse_toml(text)

    for name in raw:
        if name not in SCHEMA and name not in TOP_LEVEL:
            raise ConfigValidationError(f"unknown key{_suggest(name, list(SCHEMA) + list(TOP_LEVEL))}", name)

    version = raw.get("schema_version")
    if version is None:
        raise ConfigValidationError("required", "schema_version")
    if isinstance(version, bool) or not isinstance(version, int):
        raise ConfigValidationError(f"expected an integer, got {version!r}", "schema_version")
    if version != config.SCHEMA_VERSION:
        raise SchemaVersionError(f"schema_version {version} not supported (expected {config.SCHEMA_VERSION})")

    sections: Dict[str, Dict[str, Any]] = {}
    for name, keys in SCHEMA.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigValidationError("expected a table", name)
        for key in given:
            if key not in keys:
                raise ConfigValidationError(f"unknown key{_suggest(key, keys)}", f"{name}.{key}")
        values = {}
        for key, spec in keys.items():
            values[key] = _coerce(given[key], spec, f"{name}.{key}") if key in given else spec.default
        sections[name] = values

    declared = sections["experiment"]["kind"]
    if kind is not None:
        if kind not in EXPERIMENT_KINDS:
            raise ConfigValidationError(f"unknown experiment kind {kind!r}", "experiment.kind")
        if declared is not None and declared != kind:
            raise ConfigValidationError(f"config declares {declared!r} but {kind!r} was requested", "experiment.kind")
        declared = kind
    if declared is None:
        raise ConfigValidationError("required", "experiment.kind")
    sections["experiment"]["kind"] = declared

    seed_generated = "seed" not in raw
    if seed_generated:
        seed = int(np.random.SeedSequence().entropy % SEED_LIMIT)
        logger.info(f"No seed given, generated seed {seed}")
    else:
        seed = _check_seed(raw["seed"])

    run_config = RunConfig(version, declared, seed, sections, seed_generated)
    if validate_specs:
        check_specs(run_config)
    return run_config


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    raise ConfigurationError(f"cannot serialise {value!r}")


def dump_config(run_config: RunConfig) -> str:
    """Canonical TOML text of a RunConfig; parsing it gives an equal RunConfig."""
    lines = [f"schema_version = {run_config.schema_version}", f"seed = {run_config.seed}"]
    for name in SCHEMA:
        values = {k: v for k, v in run_config.sections[name].items() if v is not None}
        if not values:
            continue
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {_toml_value(value)}" for key, value in values.items())
    return "\n".join(lines) + "\n"


# --- builders ---------------------------------------------------------------


def build_system(run_config: RunConfig) -> SpinSystemSpec:
    s = run_config.section("system")
    preset = s["preset"]
    if preset == "lone-nv":
        return lone_nv(s["theta"], s["phi"])
    if preset == "lone-p1":
        return lone_p1(s["theta"], s["phi"])
    return cluster_system(
        d_nv_p1=s["d_nv_p1"],
        d_nv_c=None if preset == "pair-nitrogens" else s["d_nv_c"],
        theta=s["theta"],
        phi=s["phi"],
        nv_p1_angle=s["nv_p1_angle"],
        nv_c_angle=s["nv_c_angle"],
        carbon_partner=s["carbon_partner"],
        p1_nitrogen=preset in ("quartet", "full", "pair-nitrogens"),
        nv_nitrogen=preset in ("full", "pair-nitrogens"),
        p1_hyperfine=(s["p1_a_par"], s["p1_a_perp"]),
        nv_hyperfine=s["nv_a_iso"],
        quadrupole=s["quadrupole"],
        p1_secular=s["p1_secular"],
    )


def build_pump(run_config: RunConfig) -> Optional[PumpSpec]:
    p = run_config.section("pump")
    if p["mode"] == "continuous":
        return PumpSpec("continuous", None, p["pump_rate"], p["pulse_gate"])
    return PumpSpec("stroboscopic", p["reset_interval"], None, p["pulse_gate"])


def build_protocol(run_config: RunConfig, system: Optional[SpinSystemSpec] = None) -> ProtocolSpec:
    sw = run_config.section("sweep")
    pr = run_config.section("protocol")
    system = system or build_system(run_config)
    b_center = sw["b_center"]
    if b_center is None:
        b_center = config.NV_ZERO_FIELD / (2 * abs(config.GAMMA_E))
    sweep = FieldSweepSpec(b_center, sw["delta_b"], sw["t_lh"], sw["t_hl"], sw["n_cycles"], sw["start_direction"])
    return ProtocolSpec(
        system,
        sweep,
        build_pump(run_config),
        pr["t_p"],
        pr["t1n"],
        pr["p_sat"],
        pr["dilution"],
        run_config.get("scan.window_half_width"),
        run_config.get("dynamics.step_tolerance"),
    )


def build_ensemble(run_config: RunConfig, p1_ppm: Optional[float] = None, nv_ppm: Optional[float] = None) -> DefectEnsembleSpec:
    g = run_config.section("geometry")
    return DefectEnsembleSpec(
        p1_ppm if p1_ppm is not None else g["p1_ppm"],
        nv_ppm if nv_ppm is not None else g["nv_ppm"],
        g["box_edge"],
        g["target_count"],
        g["placement"],
        run_config.seed,
    )


def build_cluster_rule(run_config: RunConfig) -> ClusterRule:
    g = run_config.section("geometry")
    return ClusterRule(g["threshold_fraction"], g["coupling_floor"], g["pairs"])


def build_lz_params(run_config: RunConfig) -> LZParams:
    f = run_config.section("fit")
    return LZParams(f["delta0"], f["delta1"], f["k"], f["p_m"])


def build_rate_curve(run_config: RunConfig) -> Optional[RateCurve]:
    f = run_config.section("fit")
    if f["rates"] is None and f["values"] is None:
        return None
    if f["rates"] is None or f["values"] is None:
        raise ConfigValidationError("rates and values must be given together", "fit.values")
    return RateCurve(f["rates"], f["values"], f["sigma"])


_SPEC_CHECKS = {
    "levels": ("system",),
    "crossings": ("system",),
    "sweep": ("system",),
    "rate-scan": ("system",),
    "dnp-spectrum": ("system",),
    "range-scan": ("system", "pump"),
    "fraction-scan": ("protocol",),
    "buildup": ("protocol",),
    "geometry": ("ensemble", "cluster"),
    "fit": ("fit",),
}


def check_specs(run_config: RunConfig) -> None:
    """Build every module spec the experiment kind needs, reporting failures as validation errors."""
    builders = {
        "system": ("system", build_system),
        "pump": ("pump", build_pump),
        "protocol": ("protocol", build_protocol),
        "ensemble": ("geometry", build_ensemble),
        "cluster": ("geometry", build_cluster_rule),
        "fit": ("fit", build_rate_curve),
    }
    for name in _SPEC_CHECKS.get(run_config.kind, ()):
        table, builder = builders[name]
        try:
            builder(run_config)
        except ConfigValidationError:
            raise
        except ConfigurationError as e:
            raise ConfigValidationError(str(e), table) from e

    if run_config.kind == "fit":
        f = run_config.section("fit")
        if not f["synthetic"] and f["data"] is None and f["rates"] is None:
            raise ConfigValidationError("give data, rates/values, or synthetic = true", "fit")
        if f["synthetic"]:
            try:
                build_lz_params(run_config)
            except ConfigurationError as e:
                raise ConfigValidationError(str(e), "fit") from e
