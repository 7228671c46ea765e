import csv
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

import config
from accounting import enhancement_report, thermal_polarization
from dynamics import (
    crossing_window,
    dnp_spectrum,
    motif_centers,
    motif_grid,
    multi_cycle_protocol,
    satellite_centers,
    spectrum_motifs,
    fraction_scan,
    rate_scan,
    single_sweep_polarization,
    sweep_range_scan,
)
from errors import ConfigValidationError, FitFailed, OutputError
from geometry import (
    cluster_distribution,
    coupling_stats,
    ks_distance,
    mean_distance_vs_concentration,
    nn_distance_stats,
    poisson_nn_mean,
)
from lzmodel import RateCurve, argmax_rate, fit, transfer
from runconfig import (
    RunConfig,
    build_cluster_rule,
    build_ensemble,
    build_lz_params,
    build_protocol,
    build_pump,
    build_rate_curve,
    build_system,
)
from spectra import find_crossings, level_diagram, matching_field, orientation_cone
from spinsys import NV_LABEL, SpinSystemSpec
from utils import atomic_write_text, format_json, format_table_csv, get_current_timestamp, spec_hash, validate_table

logger = logging.getLogger(__name__)

REFERENCE_MEAN_DISTANCE_NM = 4.8
REFERENCE_MEAN_COUPLING_MHZ = 4.0


@dataclass
class ResultTable:
    columns: List[str]
    rows: List[List[Any]]
    metadata: Dict[str, Any] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ResultEnvelope:
    kind: str
    config_text: str
    config_hash: str
    seed: int
    tool_version: str
    wall_time_s: float
    data: ResultTable
    warnings: List[str] = field(default_factory=list)

    def metadata(self) -> Dict[str, Any]:
        """Sidecar contents; free of timing so identical runs give identical files."""
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "columns": self.data.columns,
            **self.data.metadata,
        }

    def as_json(self) -> Dict[str, Any]:
        return {
            "config": self.config_text,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "wall_time_s": self.wall_time_s,
            "generated_at": get_current_timestamp(),
            "data": {
                "columns": self.data.columns,
                "rows": self.data.rows,
                "metadata": self.metadata(),
                **self.data.details,
            },
            "warnings": self.warnings,
        }


class WarningCollector(logging.Handler):
    """Collects WARNING records emitted while an experiment runs."""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(record.getMessage())


class ExperimentRunner:
    """Runs one configured experiment and writes its outputs."""

    def __init__(self, run_config: RunConfig):
        self.config = run_config
        self.handlers: Dict[str, Callable[[], ResultTable]] = {
            "levels": self._run_levels,
            "crossings": self._run_crossings,
            "matching-field": self._run_matching_field,
            "orientation-cone": self._run_orientation_cone,
            "sweep": self._run_sweep,
            "rate-scan": self._run_rate_scan,
            "fraction-scan": self._run_fraction_scan,
            "buildup": self._run_buildup,
            "dnp-spectrum": self._run_dnp_spectrum,
            "range-scan": self._run_range_scan,
            "geometry": self._run_geometry,
            "fit": self._run_fit,
            "thermal": self._run_thermal,
        }

    def run(self) -> ResultEnvelope:
        """
        Execute the configured experiment.

        Returns:
            ResultEnvelope with the result table and collected warnings
        """
        kind = self.config.kind
        logger.info(f"Starting {kind} experiment (seed {self.config.seed}, config {self.config.config_hash[:12]})")

        collector = WarningCollector()
        root = logging.getLogger()
        root.addHandler(collector)
        started = time.perf_counter()
        try:
            table = self.handlers[kind]()
        finally:
            root.removeHandler(collector)
        elapsed = time.perf_counter() - started

        if not validate_table(table.columns, table.rows):
            collector.messages.append("result table is not rectangular")

        table.metadata.setdefault("tolerances", self._tolerances())
        envelope = ResultEnvelope(
            kind=kind,
            config_text=self.config.canonical_text(),
            config_hash=self.config.config_hash,
            seed=self.config.seed,
            tool_version=config.TOOL_VERSION,
            wall_time_s=elapsed,
            data=table,
            warnings=collector.messages,
        )
        logger.info(f"Finished {kind} experiment: {len(table.rows)} rows in {elapsed:.2f} s")
        return envelope

    def write(self, envelope: ResultEnvelope, path: Optional[str] = None, fmt: Optional[str] = None) -> List[str]:
        """
        Write the envelope as CSV plus metadata sidecar, or as JSON.

        Args:
            envelope: Result to write
            path: Output path (None writes to stdout)
            fmt: "csv" or "json" (defaults to the config)

        Returns:
            Paths written
        """
        path = path if path is not None else self.config.output_path
        fmt = fmt or self.config.output_format

        if fmt == "json":
            text = format_json(envelope.as_json())
            sidecar = None
        else:
            text = format_table_csv(envelope.data.columns, envelope.data.rows)
            sidecar = format_json(envelope.metadata())

        if path is None:
            sys.stdout.write(text)
            return []

        directory = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(directory):
            raise OutputError(f"output directory {directory} does not exist")

        atomic_write_text(path, text)
        if sidecar is None:
            return [path]
        meta_path = f"{path}.meta.json"
        try:
            atomic_write_text(meta_path, sidecar)
        except OutputError:
            os.remove(path)
            raise
        return [path, meta_path]

    # --- helpers ------------------------------------------------------------

    def _tolerances(self) -> Dict[str, float]:
        return {
            "step_tolerance": self.config.get("dynamics.step_tolerance"),
            "crossing_xtol_mT": config.CROSSING_XTOL_MT,
            "matching_xtol_mT": config.MATCHING_XTOL_MT,
            "gap_prominence_MHz": config.GAP_PROMINENCE_MHZ,
        }

    def _system(self) -> Tuple[SpinSystemSpec, Dict[str, Any]]:
        system = build_system(self.config)
        meta = {
            "spec_hash": spec_hash(system.describe()),
            "system": system.labels,
            "dimension": system.dim,
            "preset_geometry": dict(system.presets),
            "theta_deg": system.theta,
        }
        return system, meta

    def _field_range(self, system: SpinSystemSpec, half_width: float) -> Tuple[float, float]:
        scan = self.config.section("scan")
        if scan["b_min"] is not None and scan["b_max"] is not None:
            if not scan["b_max"] > scan["b_min"]:
                raise ConfigValidationError("b_max must exceed b_min", "scan.b_max")
            return scan["b_min"], scan["b_max"]
        if not system.has(NV_LABEL):
            return 0.0, 2 * config.NV_ZERO_FIELD / (2 * abs(config.GAMMA_E))
        lo, hi = crossing_window(system, half_width)
        return max(0.0, scan["b_min"] if scan["b_min"] is not None else lo), (scan["b_max"] if scan["b_max"] is not None else hi)

    # --- experiment kinds ---------------------------------------------------

    def _run_levels(self) -> ResultTable:
        system, meta = self._system()
        scan = self.config.section("scan")
        b_range = self._field_range(system, 0.4)
        diagram = level_diagram(system, b_range, scan["n_points"], scan["with_vectors"], scan["track"])
        meta.update(diagram.metadata)
        details = {}
        if diagram.vectors is not None:
            details["eigenvectors"] = {
                "real": diagram.vectors.real.tolist(),
                "imag": diagram.vectors.imag.tolist(),
            }
        return ResultTable(diagram.columns, diagram.rows(), meta, details)

    def _run_crossings(self) -> ResultTable:
        system, meta = self._system()
        b_range = self._field_range(system, 0.4)
        report = find_crossings(system, b_range, resolution=self.config.get("scan.resolution"))
        meta.update(report.metadata)
        if report.delta1 is not None:
            meta["delta1_kHz"] = report.delta1.gap * 1e3
            meta["delta1_B_mT"] = report.delta1.b_c
        if report.delta0 is not None:
            meta["delta0_kHz"] = report.delta0.gap * 1e3
            meta["delta0_B_mT"] = report.delta0.b_c
        return ResultTable(list(report.columns), report.rows(), meta)

    def _run_matching_field(self) -> ResultTable:
        thetas = self.config.get("scan.thetas")
        rows = [[theta, matching_field(theta)] for theta in thetas]
        meta = {"analytic_B_m0_mT": config.NV_ZERO_FIELD / (2 * abs(config.GAMMA_E))}
        return ResultTable(["theta_deg", "B_m_mT"], rows, meta)

    def _run_orientation_cone(self) -> ResultTable:
        rows = []
        for delta_b in self.config.get("scan.delta_bs"):
            cone = orientation_cone(delta_b)
            rows.append([cone["delta_B_mT"], cone["theta_max_deg"], cone["B_m_edge_mT"], cone["solid_angle_fraction"]])
        return ResultTable(["delta_B_mT", "theta_max_deg", "B_m_edge_mT", "solid_angle_fraction"], rows)

    def _run_sweep(self) -> ResultTable:
        system, meta = self._system()
        sweep = self.config.section("sweep")
        b_low, b_high = self._field_range(system, self.config.get("scan.window_half_width"))
        result = single_sweep_polarization(
            system, b_low, b_high, sweep["rate"], sweep["direction"], self.config.get("dynamics.step_tolerance")
        )
        meta.update({"P_final": result.polarization, "rate_mT_per_ms": result.rate, "direction": result.direction})
        return ResultTable(list(result.columns), result.rows(), meta)

    def _run_rate_scan(self) -> ResultTable:
        system, meta = self._system()
        scan = self.config.section("scan")
        window = self._field_range(system, scan["window_half_width"])
        rows = rate_scan(system, scan["rates"], scan["direction"], window, self.config.get("dynamics.step_tolerance"))
        meta.update({"direction": scan["direction"], "window_mT": list(window)})
        return ResultTable(["rate_mT_per_ms", "P"], [list(row) for row in rows], meta)

    def _run_fraction_scan(self) -> ResultTable:
        system, meta = self._system()
        protocol = build_protocol(self.config, system)
        rows = fraction_scan(protocol, self.config.get("scan.fractions"))
        meta.update({"t_c_ms": protocol.sweep.period, "delta_B_mT": protocol.sweep.delta_b, "t_p_ms": protocol.t_p})
        return ResultTable(["t_LH_over_t_c", "P"], [list(row) for row in rows], meta)

    def _run_buildup(self) -> ResultTable:
        system, meta = self._system()
        result = multi_cycle_protocol(build_protocol(self.config, system))
        meta.update(
            {
                "buildup_time_ms": result.buildup_time,
                "injection_LH": result.injection_lh,
                "injection_HL": result.injection_hl,
                "n_cycles": result.n_cycles,
                "repolarized_fraction_LH": result.repolarization[0],
                "repolarized_fraction_HL": result.repolarization[1],
            }
        )
        return ResultTable(list(result.columns), result.rows(), meta)

    def _run_dnp_spectrum(self) -> ResultTable:
        system, meta = self._system()
        scan = self.config.section("scan")
        dynamics = self.config.section("dynamics")
        if scan["fields"] is not None:
            fields = list(scan["fields"])
        else:
            b_min = scan["b_min"] if scan["b_min"] is not None else 46.0
            b_max = scan["b_max"] if scan["b_max"] is not None else 56.0
            fields = np.linspace(b_min, b_max, scan["n_points"]).tolist()
        if scan["refine_motifs"]:
            fields = sorted(set(round(b, 9) for b in fields) | set(motif_grid(system)))
        rows = dnp_spectrum(system, fields, dynamics["pump_cycles"], dynamics["tau_evol"])
        meta.update(
            {
                "tau_evol_ms": dynamics["tau_evol"],
                "pump_cycles": dynamics["pump_cycles"],
                "motif_centers_mT": {str(m): b for m, b in motif_centers(system).items()},
                "satellite_centers_mT": {str(m): b for m, b in satellite_centers(system).items()},
                "sign_changing_motifs": [list(span) for span in spectrum_motifs(rows)],
            }
        )
        return ResultTable(["B0_mT", "P"], [list(row) for row in rows], meta)

    def _run_range_scan(self) -> ResultTable:
        system, meta = self._system()
        scan = self.config.section("scan")
        sweep = self.config.section("sweep")
        pump = build_pump(self.config) if self.config.get("pump.enabled") else None
        slow, fast = max(sweep["t_lh"], sweep["t_hl"]), min(sweep["t_lh"], sweep["t_hl"])
        rows = sweep_range_scan(
            system,
            scan["ranges"],
            scan["direction"],
            scan["b_start"],
            slow,
            fast,
            scan["n_cycles"],
            pump,
            self.config.get("dynamics.step_tolerance"),
        )
        meta.update({"direction": scan["direction"], "n_cycles": scan["n_cycles"], "pumped": pump is not None})
        return ResultTable(["deltaB_mT", "P"], [list(row) for row in rows], meta)

    def _run_geometry(self) -> ResultTable:
        g = self.config.section("geometry")
        spec = build_ensemble(self.config)
        meta = {
            "statistic": g["statistic"],
            "p1_ppm": spec.p1_ppm,
            "nv_ppm": spec.nv_ppm,
            "ppm_to_density_nm3": config.PPM_TO_DENSITY,
            "box_edge_nm": spec.edge,
            "placement": spec.placement,
        }

        if g["statistic"] == "distance":
            stats = nn_distance_stats(spec, g["n_samples"], g["bin_width"])
            meta.update(
                {
                    "mean_nm": stats.mean,
                    "stderr_nm": stats.stderr,
                    "poisson_mean_nm": poisson_nn_mean(spec.p1_density),
                    "ks_distance": ks_distance(stats.distances, spec.p1_density),
                    "reference_mean_nm": REFERENCE_MEAN_DISTANCE_NM,
                }
            )
            return ResultTable(list(stats.columns), stats.rows(), meta)

        if g["statistic"] == "coupling":
            stats = coupling_stats(spec, g["n_samples"])
            meta.update({"mean_MHz": stats.mean, "median_MHz": stats.median, "reference_mean_MHz": REFERENCE_MEAN_COUPLING_MHZ})
            if not 0.5 <= stats.mean / REFERENCE_MEAN_COUPLING_MHZ <= 2.0:
                logger.warning(f"Mean coupling {stats.mean:.3g} MHz not within a factor 2 of {REFERENCE_MEAN_COUPLING_MHZ} MHz")
            return ResultTable(list(stats.columns), stats.rows(), meta)

        if g["statistic"] == "cluster":
            rule = build_cluster_rule(self.config)
            pmf = cluster_distribution(spec, rule, g["n_realizations"])
            meta.update(
                {
                    "threshold_fraction": rule.threshold_fraction,
                    "coupling_floor_MHz": rule.min_coupling,
                    "pairs": rule.pairs,
                    "mean_size": sum(n * p for n, p in pmf.items()),
                }
            )
            return ResultTable(["n", "probability"], [[n, p] for n, p in pmf.items()], meta)

        rows = mean_distance_vs_concentration(g["ppm_list"], g["ratio"], g["n_samples"], spec)
        meta["ratio"] = g["ratio"]
        return ResultTable(["ppm", "mean_d_nm", "stderr_nm"], [list(row) for row in rows], meta)

    def _fit_data(self) -> RateCurve:
        f = self.config.section("fit")
        if f["data"] is not None:
            return read_rate_curve(f["data"])
        curve = build_rate_curve(self.config)
        if curve is not None:
            return curve

        params = build_lz_params(self.config)
        rates = np.logspace(math.log10(f["rate_min"]), math.log10(f["rate_max"]), f["n_points"])
        values = transfer(params, rates)
        if f["noise"] > 0:
            rng = np.random.default_rng(self.config.seed)
            values = values * (1 + f["noise"] * rng.standard_normal(len(values)))
        logger.info(f"Synthetic fit data from {params.as_dict()} with {f['noise']:.0%} noise")
        return RateCurve(tuple(rates), tuple(values))

    def _run_fit(self) -> ResultTable:
        f = self.config.section("fit")
        data = self._fit_data()
        try:
            result = fit(data, multistart=f["multistart"])
        except FitFailed as e:
            if e.best is not None:
                logger.error(f"Best-so-far fit (not converged): {e.best.params.as_dict()}")
            raise

        model = transfer(result.params, np.asarray(data.rates))
        rows = [
            [rate, value, float(m), float(m - value)]
            for rate, value, m in zip(data.rates, data.values, model)
        ]
        meta = {**result.params.as_dict(), "rms": result.rms, "converged": result.converged}
        try:
            meta["argmax_rate_mT_per_ms"] = argmax_rate(result.params)
        except Exception as e:
            logger.warning(f"Could not locate the optimum rate: {e}")
        if f["synthetic"]:
            meta["true_params"] = build_lz_params(self.config).as_dict()
        return ResultTable(["rate_mT_per_ms", "amplitude", "model", "residual"], rows, meta, {"fit": result.as_dict()})

    def _run_thermal(self) -> ResultTable:
        t = self.config.section("thermal")
        p_field = thermal_polarization(t["field_t"], t["temperature_k"], t["gamma_mhz_per_t"])
        report = enhancement_report(
            t["epsilon"],
            t["fill_fraction"],
            t["t_dnp_s"],
            t["t_thermal_s"],
            t["p_thermal"] if t["p_thermal"] is not None else p_field,
            t["quoted_gain"],
        )
        meta = {"inputs": report.inputs, "notes": report.notes, "field_T": t["field_t"], "temperature_K": t["temperature_k"]}
        return ResultTable(list(report.columns), report.rows(), meta)


def read_rate_curve(path: str) -> RateCurve:
    """
    Read a fit input CSV with columns rate_mT_per_ms, amplitude[, sigma].

    Args:
        path: CSV file path

    Returns:
        RateCurve sorted by rate
    """
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            rows = [[float(x) for x in row] for row in reader if row]
    except OSError as e:
        raise OutputError(f"Cannot read {path}: {e}") from e
    except (StopIteration, ValueError) as e:
        raise ConfigValidationError(f"malformed fit data in {path}: {e}", "fit.data") from e

    if [h.strip() for h in header[:2]] != ["rate_mT_per_ms", "amplitude"]:
        raise ConfigValidationError(f"expected header rate_mT_per_ms, amplitude[, sigma], got {header}", "fit.data")
    return RateCurve.from_rows(rows)
