"""Eigenstructure versus field: level diagrams, avoided crossings and the matching field."""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment, minimize_scalar
from scipy.signal import find_peaks

import config
from errors import ConfigurationError, NoMatchingField
from spinsys import (
    LinearFieldHamiltonian,
    SpinSpecies,
    SpinSystemSpec,
    SystemLike,
    as_field_linear,
    check_hermitian,
    nv_center,
    p1_center,
)
from utils import spec_hash

logger = logging.getLogger(__name__)

LevelPair = Tuple[int, int]


@dataclass
class LevelDiagram:
    fields: np.ndarray
    energies: np.ndarray
    vectors: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def columns(self) -> List[str]:
        return ["B_mT"] + [f"level_{i}_MHz" for i in range(self.energies.shape[1])]

    def rows(self) -> List[List[float]]:
        return [[float(b)] + [float(e) for e in row] for b, row in zip(self.fields, self.energies)]


@dataclass(frozen=True)
class Crossing:
    b_c: float
    gap: float
    level_lo: int
    level_hi: int


@dataclass
class CrossingReport:
    entries: List[Crossing]
    delta0: Optional[Crossing] = None
    delta1: Optional[Crossing] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    columns = ["B_c_mT", "gap_MHz", "level_lo", "level_hi"]

    def rows(self) -> List[List[Any]]:
        return [[c.b_c, c.gap, c.level_lo, c.level_hi] for c in self.entries]


def _system_hash(system: SystemLike) -> str:
    if isinstance(system, SpinSystemSpec):
        return spec_hash(system.describe())
    h = as_field_linear(system)
    return spec_hash({"offset": np.round(h.offset, 12), "slope": np.round(h.slope, 12)})


def _fix_phases(vectors: np.ndarray) -> np.ndarray:
    """Make the first non-negligible component of every column real positive."""
    vectors = np.array(vectors, dtype=complex)
    magnitude = np.abs(vectors)
    threshold = 1e-10 * magnitude.max(axis=-2, keepdims=True)
    first = np.argmax(magnitude > threshold, axis=-2)
    pivots = np.take_along_axis(vectors, first[..., None, :], axis=-2)
    phases = pivots / np.abs(pivots)
    return vectors / phases


def _order_degenerate(values: np.ndarray, vectors: np.ndarray, tol: float) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(values))))
    start = 0
    n = len(values)
    while start < n:
        stop = start + 1
        while stop < n and values[stop] - values[stop - 1] <= tol * scale:
            stop += 1
        if stop - start > 1:
            block = vectors[:, start:stop]
            keys = [
                tuple(x for c in block[:, k] for x in (-round(c.real, 12), -round(c.imag, 12)))
                for k in range(stop - start)
            ]
            order = sorted(range(stop - start), key=lambda k: keys[k])
            vectors[:, start:stop] = block[:, order]
        start = stop
    return vectors


def eigenlevels(h: np.ndarray, tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sorted eigenvalues and phase-fixed eigenvectors of a Hermitian matrix.

    Args:
        h: Hermitian matrix, MHz
        tol: Relative width of a degenerate subspace

    Returns:
        (values, vectors) with values ascending and vectors as columns
    """
    check_hermitian(h, "Hamiltonian")
    values, vectors = np.linalg.eigh(h)
    vectors = _fix_phases(vectors)
    vectors = _order_degenerate(values, vectors, tol)
    return values, vectors


def _field_grid(b_range: Tuple[float, float], n_points: int) -> np.ndarray:
    b_lo, b_hi = (float(b) for b in b_range)
    if n_points < 2:
        raise ConfigurationError(f"n_points must be at least 2, got {n_points}")
    if not b_hi > b_lo:
        raise ConfigurationError(f"field range ({b_lo}, {b_hi}) is empty")
    if b_lo < 0:
        raise ConfigurationError("field range must be non-negative")
    return np.linspace(b_lo, b_hi, n_points)


def _batched_eigvalsh(h: LinearFieldHamiltonian, fields: np.ndarray) -> np.ndarray:
    out = np.empty((len(fields), h.dim))
    for start in range(0, len(fields), config.EIGH_CHUNK):
        chunk = fields[start:start + config.EIGH_CHUNK]
        out[start:start + len(chunk)] = np.linalg.eigvalsh(h.stack(chunk))
    return out


def level_diagram(
    system: SystemLike,
    b_range: Tuple[float, float],
    n_points: int,
    with_vectors: bool = False,
    track: bool = False,
) -> LevelDiagram:
    """
    Eigenlevels over a uniform field grid.

    Args:
        system: Spin system or field-linear Hamiltonian
        b_range: (B_min, B_max) in mT
        n_points: Number of grid fields
        with_vectors: Keep eigenvectors
        track: Reorder columns to follow branches by eigenvector overlap

    Returns:
        LevelDiagram with ascending energies per field (unless tracked)
    """
    h = as_field_linear(system)
    fields = _field_grid(b_range, n_points)

    energies = np.empty((n_points, h.dim))
    vectors = np.empty((n_points, h.dim, h.dim), dtype=complex) if (with_vectors or track) else None
    for i, b in enumerate(fields):
        if vectors is None:
            energies[i] = np.linalg.eigvalsh(h.at(b))
        else:
            energies[i], vectors[i] = eigenlevels(h.at(b))

    diagram = LevelDiagram(
        fields,
        energies,
        vectors,
        {"spec_hash": _system_hash(system), "b_range_mT": list(b_range), "n_points": n_points},
    )
    if track:
        perm = track_branches(diagram)
        diagram.energies = np.take_along_axis(energies, perm, axis=1)
        diagram.vectors = np.take_along_axis(vectors, perm[:, None, :], axis=2)
        diagram.metadata["tracked"] = True
    if not with_vectors:
        diagram.vectors = None

    logger.info(f"Level diagram: {n_points} fields over {b_range[0]}-{b_range[1]} mT, dim {h.dim}")
    return diagram


def track_branches(diagram: LevelDiagram) -> np.ndarray:
    """
    Follow branches across fields by maximal eigenvector overlap.

    Args:
        diagram: Sorted diagram carrying eigenvectors

    Returns:
        Integer array perm with perm[i, l] = sorted index at field i of branch l
    """
    if diagram.vectors is None:
        raise ConfigurationError("branch tracking needs a diagram with eigenvectors")

    n_fields, dim = diagram.energies.shape
    perm = np.empty((n_fields, dim), dtype=int)
    perm[0] = np.arange(dim)
    for i in range(n_fields - 1):
        previous = diagram.vectors[i][:, perm[i]]
        overlap = np.abs(previous.conj().T @ diagram.vectors[i + 1])
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        perm[i + 1, rows] = cols
    return perm


def _pair_gap(h: LinearFieldHamiltonian, lo: int, hi: int):
    def gap(b: float) -> float:
        values = np.linalg.eigvalsh(h.at(b))
        return float(values[hi] - values[lo])

    return gap


def find_crossings(
    system: SystemLike,
    b_range: Tuple[float, float],
    level_pairs: Optional[Sequence[LevelPair]] = None,
    resolution: float = config.CROSSING_SCAN_RESOLUTION_MT,
    inner_pair: Optional[LevelPair] = None,
    outer_pairs: Optional[Sequence[LevelPair]] = None,
) -> CrossingReport:
    """
    Locate avoided crossings as interior local minima of pairwise gaps.

    Args:
        system: Spin system or field-linear Hamiltonian
        b_range: (B_min, B_max) in mT
        level_pairs: Sorted-level index pairs to inspect (default: all adjacent pairs)
        resolution: Coarse scan step, mT (<= 0.01)
        inner_pair: Pair whose smallest gap is Delta1 (default: overall smallest gap)
        outer_pairs: Pairs whose smallest gap is Delta0 (default: neighbours of the inner pair)

    Returns:
        CrossingReport sorted by field, with Delta0/Delta1 designated
    """
    if not 0 < resolution <= config.CROSSING_SCAN_RESOLUTION_MT:
        raise ConfigurationError(
            f"scan resolution must be in (0, {config.CROSSING_SCAN_RESOLUTION_MT}] mT, got {resolution}"
        )
    h = as_field_linear(system)
    b_lo, b_hi = (float(b) for b in b_range)
    n_points = int(math.ceil((b_hi - b_lo) / resolution)) + 1
    fields = _field_grid((b_lo, b_hi), max(n_points, 3))
    energies = _batched_eigvalsh(h, fields)

    if level_pairs is None:
        level_pairs = [(k, k + 1) for k in range(h.dim - 1)]

    entries: List[Crossing] = []
    for lo, hi in level_pairs:
        if not 0 <= lo < hi < h.dim:
            raise ConfigurationError(f"level pair ({lo}, {hi}) invalid for dimension {h.dim}")
        gaps = energies[:, hi] - energies[:, lo]
        peaks, _ = find_peaks(-gaps, prominence=config.GAP_PROMINENCE_MHZ)
        gap_fn = _pair_gap(h, lo, hi)
        for index in peaks:
            result = minimize_scalar(
                gap_fn,
                bounds=(fields[index - 1], fields[index + 1]),
                method="bounded",
                options={"xatol": config.CROSSING_XTOL_MT},
            )
            b_c = float(result.x)
            entries.append(Crossing(b_c, max(float(result.fun), 0.0), lo, hi))
            logger.debug(f"Crossing levels {lo}-{hi} at {b_c:.6f} mT, gap {result.fun:.6g} MHz")

    entries.sort(key=lambda c: (c.b_c, c.level_lo, c.level_hi))
    report = CrossingReport(
        entries,
        metadata={"spec_hash": _system_hash(system), "b_range_mT": [b_lo, b_hi], "resolution_mT": resolution},
    )
    _designate_gaps(report, inner_pair, outer_pairs)

    logger.info(
        f"Found {len(entries)} crossings in {b_lo}-{b_hi} mT"
        + (f", Delta1 = {report.delta1.gap * 1e3:.2f} kHz" if report.delta1 else "")
        + (f", Delta0 = {report.delta0.gap * 1e3:.2f} kHz" if report.delta0 else "")
    )
    return report


def _designate_gaps(
    report: CrossingReport,
    inner_pair: Optional[LevelPair],
    outer_pairs: Optional[Sequence[LevelPair]],
) -> None:
    if not report.entries:
        return

    if inner_pair is not None:
        inner = [c for c in report.entries if (c.level_lo, c.level_hi) == tuple(inner_pair)]
    else:
        inner = list(report.entries)
    if not inner:
        return
    delta1 = min(inner, key=lambda c: (c.gap, c.b_c))

    if outer_pairs is None:
        outer_pairs = [(delta1.level_lo - 1, delta1.level_lo), (delta1.level_hi, delta1.level_hi + 1)]
    outer_set = {tuple(p) for p in outer_pairs}
    outer = [c for c in report.entries if (c.level_lo, c.level_hi) in outer_set]

    report.delta1 = delta1
    report.delta0 = min(outer, key=lambda c: (c.gap, c.b_c)) if outer else None
    report.metadata["delta1_pair"] = [delta1.level_lo, delta1.level_hi]
    report.metadata["delta0_pairs"] = sorted(list(p) for p in outer_set)


def _matching_mismatch(nv: SpinSpecies, p1: SpinSpecies, theta: float):
    nv_h = as_field_linear(SpinSystemSpec((nv,), (), theta))
    p1_h = as_field_linear(SpinSystemSpec((p1,), (), theta))

    def mismatch(b: float) -> float:
        nv_levels = np.linalg.eigvalsh(nv_h.at(b))
        p1_levels = np.linalg.eigvalsh(p1_h.at(b))
        return float((nv_levels[1] - nv_levels[0]) - (p1_levels[1] - p1_levels[0]))

    return mismatch


def matching_field(
    theta: float,
    nv: Optional[SpinSpecies] = None,
    p1: Optional[SpinSpecies] = None,
    bracket: Tuple[float, float] = config.MATCHING_BRACKET_MT,
    scan_step: float = 1.0,
    max_theta: float = config.MATCHING_MAX_THETA_DEG,
) -> float:
    """
    Field at which the NV |0> <-> |-1> transition matches the P1 Zeeman splitting.

    Args:
        theta: Field angle to the NV axis, degrees, in [0, max_theta]
        nv: NV species override (default bare NV)
        p1: P1 species override (default bare electron)
        bracket: Search interval, mT
        scan_step: Coarse scan step used to bracket the first sign change, mT
        max_theta: Largest accepted angle, degrees (at most 90)

    Returns:
        B_m in mT

    Raises:
        NoMatchingField: If the mismatch never changes sign in the bracket
    """
    if not 0.0 <= theta <= min(max_theta, 90.0):
        raise ConfigurationError(f"theta must lie in [0, {min(max_theta, 90.0)}] degrees, got {theta}")

    mismatch = _matching_mismatch(nv or nv_center(), p1 or p1_center(), theta)
    b_lo, b_hi = bracket
    grid = np.arange(b_lo, b_hi + scan_step / 2, scan_step)
    values = [mismatch(b) for b in grid]
    for i in range(len(grid) - 1):
        if values[i] == 0.0:
            return float(grid[i])
        if values[i] * values[i + 1] < 0:
            b_m = brentq(mismatch, grid[i], grid[i + 1], xtol=config.MATCHING_XTOL_MT)
            logger.debug(f"Matching field at theta={theta} deg: {b_m:.6f} mT")
            return float(b_m)

    raise NoMatchingField(f"no matching field in {b_lo}-{b_hi} mT at theta = {theta} deg")


def matching_curve(thetas: Sequence[float], **kwargs) -> List[Tuple[float, float]]:
    return [(float(t), matching_field(t, **kwargs)) for t in thetas]


def orientation_cone(
    delta_b: float,
    theta_max: float = config.MATCHING_MAX_THETA_DEG,
    step: float = 0.5,
) -> Dict[str, float]:
    """
    Largest field misalignment whose matching field fits a sweep window.

    The window starts at B_m(0) and spans `delta_b`.

    Args:
        delta_b: Sweep range, mT
        theta_max: Upper angle searched, degrees
        step: Coarse angle step, degrees

    Returns:
        Cone half-angle (degrees), its B_m, and the covered fraction of orientations
    """
    if not delta_b > 0:
        raise ConfigurationError(f"delta_b must be positive, got {delta_b}")

    b0 = matching_field(0.0)
    excess = lambda t: matching_field(t) - b0 - delta_b  # noqa: E731

    angles = np.arange(0.0, theta_max + step / 2, step)
    half_angle = float(angles[-1])
    for lo, hi in zip(angles[:-1], angles[1:]):
        if excess(hi) > 0:
            half_angle = float(brentq(excess, lo, hi, xtol=1e-4))
            break

    result = {
        "delta_B_mT": float(delta_b),
        "theta_max_deg": half_angle,
        "B_m_edge_mT": matching_field(half_angle),
        "solid_angle_fraction": 1.0 - math.cos(math.radians(half_angle)),
    }
    logger.info(f"Orientation cone for dB = {delta_b} mT: half-angle {half_angle:.2f} deg")
    return result
