"""
Bundled run configurations that regenerate each figure's data.

Protocol anchors: delta_B = 6 mT, t_c = 20.3 ms and t_p = 10 s for the
buildup/fraction family; delta_B = 8.6 mT and t_c = 23 ms for the orientation
figure.
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import config
from errors import ConfigurationError, OutputError
from runconfig import parse_config
from runner import ExperimentRunner

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20240101

_TRIO = """
[system]
preset = "trio"
d_nv_p1 = 0.5
d_nv_c = 0.92
"""

_QUARTET = """
[system]
preset = "quartet"
d_nv_p1 = 0.5
d_nv_c = 0.92
"""

_CYCLE = f"""
[sweep]
delta_b = {config.SWEEP_RANGE_MT!r}
t_lh = {config.CYCLE_PERIOD_MS * 10 / 11!r}
t_hl = {config.CYCLE_PERIOD_MS / 11!r}

[protocol]
t_p = {config.PUMP_TIME_MS!r}
"""


def _sweep(direction: str) -> str:
    return f"""
[experiment]
kind = "sweep"
{_TRIO}
[sweep]
rate = 0.26
direction = "{direction}"
"""


def _rate_scan(hyperfine: float) -> str:
    return f"""
[experiment]
kind = "rate-scan"

[system]
preset = "trio"
d_nv_p1 = 1.0
d_nv_c = {hyperfine!r}

[scan]
rates = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 2.0, 5.0]
direction = "up"
"""


def _cluster(p1_ppm: float) -> str:
    return f"""
[experiment]
kind = "geometry"

[geometry]
statistic = "cluster"
p1_ppm = {p1_ppm!r}
nv_ppm = {p1_ppm / 5!r}
n_realizations = 1000
"""


def _range_scan(direction: str) -> str:
    return f"""
[experiment]
kind = "range-scan"
{_QUARTET}
[scan]
direction = "{direction}"
ranges = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
n_cycles = 3
"""


# figure name -> [(output stem, TOML body without schema_version/seed)]
FIGURES: Dict[str, List[Tuple[str, str]]] = {
    "fig1c": [
        (
            "fig1c_distance",
            """
[experiment]
kind = "geometry"

[geometry]
statistic = "distance"
p1_ppm = 50.0
nv_ppm = 10.0
n_samples = 10000
""",
        ),
        (
            "fig1c_coupling",
            """
[experiment]
kind = "geometry"

[geometry]
statistic = "coupling"
p1_ppm = 50.0
nv_ppm = 10.0
n_samples = 10000
""",
        ),
        (
            "fig1c_curve",
            """
[experiment]
kind = "geometry"

[geometry]
statistic = "curve"
ppm_list = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0]
ratio = 5.0
""",
        ),
    ],
    "fig1e": [("fig1e_up", _sweep("up")), ("fig1e_down", _sweep("down"))],
    "fig1f": [(f"fig1f_{int(ppm)}ppm", _cluster(ppm)) for ppm in (10.0, 50.0, 200.0)],
    "fig2c": [
        (
            "fig2c_buildup_lh",
            f"""
[experiment]
kind = "buildup"
{_TRIO}{_CYCLE}""",
        ),
    ],
    "fig3b": [
        (
            "fig3b",
            f"""
[experiment]
kind = "fraction-scan"
{_TRIO}{_CYCLE}
[scan]
fractions = [0.0909090909090909, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9090909090909091]
""",
        ),
    ],
    "fig3c-fit": [
        (
            "fig3c_fit",
            """
[experiment]
kind = "fit"

[fit]
synthetic = true
delta0 = 250.0
delta1 = 30.0
k = 15.0
p_m = 13.0
noise = 0.05
n_points = 20
rate_min = 0.01
rate_max = 2.5
""",
        ),
    ],
    "fig3d": [(f"fig3d_hf{str(hf).replace('.', 'p')}", _rate_scan(hf)) for hf in (0.4, 1.0, 2.0)],
    "fig4c": [
        (
            "fig4c",
            f"""
[experiment]
kind = "dnp-spectrum"
{_QUARTET}
p1_secular = true

[scan]
b_min = 46.0
b_max = 56.0
n_points = 101
refine_motifs = true
""",
        ),
    ],
    "fig4e": [("fig4e_up", _range_scan("up")), ("fig4e_down", _range_scan("down"))],
    "fig5d": [
        (
            "fig5d_matching",
            """
[experiment]
kind = "matching-field"

[scan]
thetas = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0]
""",
        ),
        (
            "fig5d_cone",
            f"""
[experiment]
kind = "orientation-cone"

[scan]
delta_bs = [{config.FIG5_SWEEP_RANGE_MT!r}]
""",
        ),
    ],
}


def figure_config_text(body: str, seed: int) -> str:
    return f"schema_version = {config.SCHEMA_VERSION}\nseed = {seed}\n{body}"


def figure_command(name: str, out_dir: str, seed: Optional[int] = None, fmt: str = "csv") -> List[str]:
    """
    Run every bundled config of a figure and write its outputs.

    Args:
        name: Figure name (see FIGURES)
        out_dir: Directory receiving one file (plus sidecar) per config
        seed: Master seed (default: fixed bundled seed)
        fmt: "csv" or "json"

    Returns:
        Paths written
    """
    if name not in FIGURES:
        raise ConfigurationError(f"unknown figure {name!r}; valid names: {', '.join(sorted(FIGURES))}")
    if not os.path.isdir(out_dir):
        raise OutputError(f"output directory {out_dir} does not exist")

    seed = DEFAULT_SEED if seed is None else seed
    written = []
    for stem, body in FIGURES[name]:
        run_config = parse_config(figure_config_text(body, seed))
        path = os.path.join(out_dir, f"{stem}.{fmt}")
        run_config = run_config.with_overrides(out=path, fmt=fmt)
        logger.info(f"Figure {name}: running {stem} ({run_config.kind})")

        runner = ExperimentRunner(run_config)
        written.extend(runner.write(runner.run()))

    logger.info(f"Figure {name}: wrote {len(written)} files to {out_dir}")
    return written
