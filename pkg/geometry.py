"""Monte Carlo statistics of randomly placed NV and P1 defects in a periodic box."""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats
from scipy.spatial import cKDTree

import config
from errors import ConfigurationError
from utils import parallel_map

logger = logging.getLogger(__name__)

PLACEMENTS = ("continuum", "lattice")
PAIR_MODES = ("all", "nv_p1")

# conventional diamond cell, fractional coordinates
DIAMOND_BASIS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ]
)


def ppm_to_density(ppm: float) -> float:
    """Defects per nm^3 for a concentration in ppm of carbon sites."""
    return ppm * config.PPM_TO_DENSITY


@dataclass(frozen=True)
class DefectEnsembleSpec:
    p1_ppm: float = 50.0
    nv_ppm: float = 10.0
    box_edge: Optional[float] = None
    target_count: Optional[int] = None
    placement: str = "continuum"
    seed: int = 0

    def __post_init__(self):
        if not (self.p1_ppm > 0 and self.nv_ppm > 0):
            raise ConfigurationError("concentrations must be positive")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.box_edge is not None and self.target_count is not None:
            raise ConfigurationError("give either box_edge or target_count, not both")
        if self.nv_ppm > self.p1_ppm:
            logger.warning(f"NV concentration {self.nv_ppm} ppm exceeds P1 concentration {self.p1_ppm} ppm")

        expected = self.total_density * self.edge ** 3
        if expected < 2:
            raise ConfigurationError(f"box of {self.edge:.3g} nm holds only {expected:.3g} defects")
        if not 1e2 <= expected <= 1e6:
            raise ConfigurationError(f"expected defect count {expected:.3g} outside [1e2, 1e6]")

    @property
    def p1_density(self) -> float:
        return ppm_to_density(self.p1_ppm)

    @property
    def nv_density(self) -> float:
        return ppm_to_density(self.nv_ppm)

    @property
    def total_density(self) -> float:
        return self.p1_density + self.nv_density

    @property
    def edge(self) -> float:
        if self.box_edge is not None:
            return float(self.box_edge)
        count = self.target_count or config.ENSEMBLE_TARGET_COUNT
        return (count / self.total_density) ** (1 / 3)

    def with_concentration(self, p1_ppm: float, nv_ppm: float) -> "DefectEnsembleSpec":
        return DefectEnsembleSpec(p1_ppm, nv_ppm, None, self.target_count, self.placement, self.seed)


@dataclass(frozen=True)
class ClusterRule:
    threshold_fraction: float = config.CLUSTER_THRESHOLD_FRACTION
    min_coupling: float = config.CLUSTER_COUPLING_FLOOR_MHZ
    pairs: str = "all"

    def __post_init__(self):
        if not 0 < self.threshold_fraction <= 1:
            raise ConfigurationError(f"threshold_fraction must lie in (0, 1], got {self.threshold_fraction}")
        if self.min_coupling < 0:
            raise ConfigurationError("min_coupling must be non-negative")
        if self.pairs not in PAIR_MODES:
            raise ConfigurationError(f"pairs must be one of {PAIR_MODES}, got {self.pairs!r}")


@dataclass
class Ensemble:
    positions: np.ndarray
    is_nv: np.ndarray
    box_edge: float

    @property
    def nv_positions(self) -> np.ndarray:
        return self.positions[self.is_nv]

    @property
    def p1_positions(self) -> np.ndarray:
        return self.positions[~self.is_nv]


@dataclass
class DistanceStats:
    mean: float
    stderr: float
    bin_edges: np.ndarray
    density: np.ndarray
    distances: np.ndarray

    columns = ["bin_lo_nm", "bin_hi_nm", "density"]

    def rows(self) -> List[List[float]]:
        return [[float(lo), float(hi), float(d)] for lo, hi, d in zip(self.bin_edges, self.bin_edges[1:], self.density)]


@dataclass
class CouplingStats:
    mean: float
    median: float
    bin_edges: np.ndarray
    density: np.ndarray
    couplings: np.ndarray

    columns = ["bin_lo_MHz", "bin_hi_MHz", "density"]

    def rows(self) -> List[List[float]]:
        return [[float(lo), float(hi), float(d)] for lo, hi, d in zip(self.bin_edges, self.bin_edges[1:], self.density)]


def realization_seed(seed: int, index: int) -> List[int]:
    """Entropy for realization `index` of master seed `seed`."""
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]


def _lattice_positions(rng: np.random.Generator, count: int, edge: float) -> Tuple[np.ndarray, float]:
    cells = max(1, int(round(edge / config.DIAMOND_LATTICE_NM)))
    n_sites = 8 * cells ** 3
    if count > n_sites:
        raise ConfigurationError("more defects than lattice sites")
    chosen = np.unique(rng.integers(0, n_sites, size=count))
    while len(chosen) < count:
        chosen = np.unique(np.concatenate([chosen, rng.integers(0, n_sites, size=count - len(chosen))]))
    rng.shuffle(chosen)
    cell, basis = np.divmod(chosen, 8)
    ix, rest = np.divmod(cell, cells * cells)
    iy, iz = np.divmod(rest, cells)
    fractional = np.stack([ix, iy, iz], axis=1) + DIAMOND_BASIS[basis]
    return fractional * config.DIAMOND_LATTICE_NM, cells * config.DIAMOND_LATTICE_NM


def sample_ensemble(spec: DefectEnsembleSpec, seed: Any = None) -> Ensemble:
    """
    Place Poisson-distributed NV and P1 defects in a periodic cube.

    Args:
        spec: Ensemble specification
        seed: Seed or seed sequence (defaults to spec.seed)

    Returns:
        Ensemble with positions in [0, edge) and NV labels
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    edge = spec.edge
    volume = edge ** 3
    n_nv = int(rng.poisson(spec.nv_density * volume))
    n_p1 = int(rng.poisson(spec.p1_density * volume))

    if spec.placement == "continuum":
        positions = rng.uniform(0.0, edge, size=(n_nv + n_p1, 3))
    else:
        positions, edge = _lattice_positions(rng, n_nv + n_p1, edge)

    is_nv = np.zeros(n_nv + n_p1, dtype=bool)
    is_nv[:n_nv] = True
    return Ensemble(positions, is_nv, edge)


def coupling_magnitude(distance) -> Any:
    """Point-dipole electron coupling magnitude C_ee / r^3, MHz."""
    return config.C_EE / np.asarray(distance, dtype=float) ** 3


def _nearest_p1(ensemble: Ensemble) -> np.ndarray:
    if not ensemble.is_nv.any() or ensemble.is_nv.all():
        return np.empty(0)
    tree = cKDTree(ensemble.p1_positions, boxsize=ensemble.box_edge)
    distances, _ = tree.query(ensemble.nv_positions)
    return np.asarray(distances)


def nearest_p1_distances(spec: DefectEnsembleSpec, n_samples: int) -> np.ndarray:
    """Nearest-P1 distance for `n_samples` NV sites pooled over realizations, nm."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    pooled: List[np.ndarray] = []
    total = 0
    index = 0
    while total < n_samples:
        distances = _nearest_p1(sample_ensemble(spec, realization_seed(spec.seed, index)))
        pooled.append(distances)
        total += len(distances)
        index += 1
    logger.debug(f"Pooled {total} NV sites from {index} realizations")
    return np.concatenate(pooled)[:n_samples]


def nn_distance_stats(spec: DefectEnsembleSpec, n_samples: int = 10000, bin_width: float = 0.1) -> DistanceStats:
    """
    Nearest NV-P1 distance statistics.

    Args:
        spec: Ensemble specification
        n_samples: Number of NV sites (>= 1000)
        bin_width: Histogram bin width, nm (<= 0.2)

    Returns:
        DistanceStats with mean, standard error and a normalized histogram
    """
    if n_samples < 1000:
        raise ConfigurationError(f"n_samples must be at least 1000, got {n_samples}")
    if not 0 < bin_width <= 0.2:
        raise ConfigurationError(f"bin_width must lie in (0, 0.2] nm, got {bin_width}")

    distances = nearest_p1_distances(spec, n_samples)
    edges = np.arange(0.0, distances.max() + bin_width, bin_width)
    density, edges = np.histogram(distances, bins=edges, density=True)
    mean = float(distances.mean())
    stderr = float(distances.std(ddof=1) / math.sqrt(len(distances)))
    logger.info(f"Mean NV-P1 distance at {spec.p1_ppm} ppm P1: {mean:.4f} +/- {stderr:.4f} nm")
    return DistanceStats(mean, stderr, edges, density, distances)


def coupling_stats(spec: DefectEnsembleSpec, n_samples: int = 10000, bins_per_decade: int = 20) -> CouplingStats:
    """
    Nearest NV-P1 coupling magnitudes, histogrammed on a log scale.

    Args:
        spec: Ensemble specification
        n_samples: Number of NV sites (>= 1000)
        bins_per_decade: Log-histogram resolution

    Returns:
        CouplingStats with mean, median and histogram in MHz
    """
    if n_samples < 1000:
        raise ConfigurationError(f"n_samples must be at least 1000, got {n_samples}")
    couplings = coupling_magnitude(nearest_p1_distances(spec, n_samples))
    lo = math.floor(math.log10(couplings.min()))
    hi = math.ceil(math.log10(couplings.max()))
    edges = np.logspace(lo, hi, (hi - lo) * bins_per_decade + 1)
    density, edges = np.histogram(couplings, bins=edges, density=True)
    result = CouplingStats(float(couplings.mean()), float(np.median(couplings)), edges, density, couplings)
    logger.info(f"NV-P1 coupling at {spec.p1_ppm} ppm P1: mean {result.mean:.3f} MHz, median {result.median:.3f} MHz")
    return result


def grow_cluster(ensemble: Ensemble, rule: ClusterRule, seed_nv: int = 0) -> Optional[int]:
    """
    Size of the electron-spin cluster grown from one NV.

    The NV and its nearest P1 (coupling J_d) seed the cluster; any spin coupled
    to a member by more than max(threshold_fraction * J_d, min_coupling) joins.

    Args:
        ensemble: Defect ensemble
        rule: Cluster rule
        seed_nv: Which NV (in NV order) seeds the cluster

    Returns:
        Cluster size, or None if the ensemble lacks an NV or a P1
    """
    nv_indices = np.flatnonzero(ensemble.is_nv)
    p1_indices = np.flatnonzero(~ensemble.is_nv)
    if seed_nv >= len(nv_indices) or len(p1_indices) == 0:
        return None

    positions = ensemble.positions
    nv = int(nv_indices[seed_nv])
    p1_tree = cKDTree(positions[p1_indices], boxsize=ensemble.box_edge)
    distance, nearest = p1_tree.query(positions[nv])
    p1 = int(p1_indices[nearest])

    threshold = max(rule.threshold_fraction * float(coupling_magnitude(distance)), rule.min_coupling)
    radius = (config.C_EE / threshold) ** (1 / 3)

    tree = cKDTree(positions, boxsize=ensemble.box_edge)
    members = {nv, p1}
    frontier = [nv, p1]
    while frontier:
        member = frontier.pop()
        for other in tree.query_ball_point(positions[member], radius):
            if other in members:
                continue
            if rule.pairs == "nv_p1" and ensemble.is_nv[other] == ensemble.is_nv[member]:
                continue
            members.add(other)
            frontier.append(other)
    return len(members)


def cluster_distribution(
    spec: DefectEnsembleSpec,
    rule: ClusterRule = ClusterRule(),
    n_realizations: int = 1000,
) -> Dict[int, float]:
    """
    Probability distribution of the cluster size n.

    Args:
        spec: Ensemble specification
        rule: Cluster rule
        n_realizations: Number of clusters (>= 1000)

    Returns:
        {n: probability} sorted by n, summing to 1
    """
    if n_realizations < 1000:
        raise ConfigurationError(f"n_realizations must be at least 1000, got {n_realizations}")

    def size(index: int) -> Optional[int]:
        return grow_cluster(sample_ensemble(spec, realization_seed(spec.seed, index)), rule)

    sizes = [n for n in parallel_map(size, range(n_realizations)) if n is not None]
    extra = n_realizations
    while len(sizes) < n_realizations:
        n = size(extra)
        extra += 1
        if n is not None:
            sizes.append(n)

    counts = Counter(sizes)
    pmf = {n: counts[n] / len(sizes) for n in sorted(counts)}
    mode = max(pmf, key=lambda n: (pmf[n], -n))
    logger.info(f"Cluster sizes at {spec.p1_ppm} ppm P1 / {spec.nv_ppm} ppm NV: mode n={mode}, P(2)={pmf.get(2, 0.0):.3f}")
    return pmf


def mean_distance_vs_concentration(
    ppm_list: Sequence[float],
    ratio: float = 5.0,
    n_samples: int = 10000,
    template: Optional[DefectEnsembleSpec] = None,
) -> List[Tuple[float, float, float]]:
    """
    Mean nearest NV-P1 distance over a list of P1 concentrations at fixed [P1]/[NV].

    Args:
        ppm_list: Ascending positive P1 concentrations
        ratio: [P1]/[NV]
        n_samples: NV sites per concentration
        template: Source of seed, placement and target count

    Returns:
        (ppm, mean_d_nm, stderr_nm) rows
    """
    ppm_list = [float(p) for p in ppm_list]
    if not ppm_list or min(ppm_list) <= 0:
        raise ConfigurationError("concentrations must be positive")
    if any(b <= a for a, b in zip(ppm_list, ppm_list[1:])):
        raise ConfigurationError("concentrations must be strictly ascending")
    if not ratio > 0:
        raise ConfigurationError("ratio must be positive")

    template = template or DefectEnsembleSpec()
    rows = []
    for ppm in ppm_list:
        stats_ = nn_distance_stats(template.with_concentration(ppm, ppm / ratio), n_samples)
        rows.append((ppm, stats_.mean, stats_.stderr))
    return rows


def poisson_nn_mean(density: float) -> float:
    """Mean nearest-neighbour distance of a Poisson process, nm."""
    return float(special.gamma(4 / 3) * (4 * math.pi * density / 3) ** (-1 / 3))


def poisson_nn_cdf(distance, density: float):
    return 1.0 - np.exp(-4 * math.pi * density * np.asarray(distance) ** 3 / 3)


def ks_distance(distances: np.ndarray, density: float) -> float:
    """Kolmogorov-Smirnov distance to the Poisson nearest-neighbour law."""
    return float(stats.kstest(distances, lambda d: poisson_nn_cdf(d, density)).statistic)
