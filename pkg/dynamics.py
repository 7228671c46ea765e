"""
Density-matrix propagation through field sweeps with optical NV repolarization.

Times are in ms at the interface and in us inside the propagator, so that
exp(-2 pi i H dt) takes H in MHz directly.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import ConfigurationError, ContractViolation, NoMatchingField, StiffnessError
from spectra import Crossing, find_crossings, matching_field
from spinsys import (
    CARBON_LABEL,
    NV_LABEL,
    P1_NITROGEN_LABEL,
    LinearFieldHamiltonian,
    SpinSystemSpec,
    SystemLike,
    as_field_linear,
    spin_operators,
)
from utils import parallel_map

logger = logging.getLogger(__name__)

NV_BRIGHT_STATE = 1  # |m_s = 0> in the (+1, 0, -1) basis
DIRECTIONS = ("up", "down")


@dataclass(frozen=True)
class FieldSweepSpec:
    """Saw-tooth field cycle between B_center -/+ delta_B/2."""

    b_center: float
    delta_b: float
    t_lh: float
    t_hl: float
    n_cycles: int = 1
    start_direction: str = "up"
    waveform: str = "sawtooth"

    def __post_init__(self):
        if not self.delta_b > 0:
            raise ConfigurationError(f"delta_B must be positive, got {self.delta_b}")
        if not (self.t_lh > 0 and self.t_hl > 0):
            raise ConfigurationError(f"t_LH and t_HL must be positive, got {self.t_lh}, {self.t_hl}")
        if self.n_cycles < 1:
            raise ConfigurationError("n_cycles must be at least 1")
        if self.start_direction not in DIRECTIONS:
            raise ConfigurationError(f"start_direction must be 'up' or 'down', got {self.start_direction!r}")
        if self.waveform != "sawtooth":
            raise ConfigurationError(f"unsupported waveform {self.waveform!r}")
        if self.b_center - self.delta_b / 2 < 0:
            raise ConfigurationError("sweep window reaches negative fields")

    @property
    def period(self) -> float:
        return self.t_lh + self.t_hl

    @property
    def rate_lh(self) -> float:
        return self.delta_b / self.t_lh

    @property
    def rate_hl(self) -> float:
        return self.delta_b / self.t_hl

    @property
    def b_low(self) -> float:
        return self.b_center - self.delta_b / 2

    @property
    def b_high(self) -> float:
        return self.b_center + self.delta_b / 2


@dataclass(frozen=True)
class PumpSpec:
    """Optical repolarization: stroboscopic resets or a continuous reset rate (1/ms)."""

    mode: str = "stroboscopic"
    reset_interval: Optional[float] = config.RESET_INTERVAL_MS
    pump_rate: Optional[float] = None
    pulse_gate: Optional[float] = None

    def __post_init__(self):
        if self.mode == "stroboscopic":
            if self.reset_interval is None or self.pump_rate is not None:
                raise ConfigurationError("stroboscopic pumping needs reset_interval and no pump_rate")
            if not self.reset_interval > 0:
                raise ConfigurationError("reset_interval must be positive")
        elif self.mode == "continuous":
            if self.pump_rate is None or self.reset_interval is not None:
                raise ConfigurationError("continuous pumping needs pump_rate and no reset_interval")
            if not self.pump_rate > 0:
                raise ConfigurationError("pump_rate must be positive")
        else:
            raise ConfigurationError(f"unknown pump mode {self.mode!r}")
        if self.pulse_gate is not None and not self.pulse_gate > 0:
            raise ConfigurationError("pulse_gate must be positive")


@dataclass(frozen=True)
class ProtocolSpec:
    system: SpinSystemSpec
    sweep: FieldSweepSpec
    pump: PumpSpec = PumpSpec()
    t_p: float = config.PUMP_TIME_MS
    t1n: Optional[float] = config.T1N_MS
    p_sat: float = config.P_SAT
    dilution: float = config.INJECTION_DILUTION
    window_half_width: float = config.SWEEP_HALF_WINDOW_MT
    step_tolerance: float = config.STEP_TOLERANCE

    def __post_init__(self):
        if self.t_p < self.sweep.period:
            raise ConfigurationError(f"t_p = {self.t_p} ms shorter than the cycle period {self.sweep.period} ms")
        if self.t1n is not None and not self.t1n > 0:
            raise ConfigurationError("T1n must be positive when given")
        if not self.p_sat > 0:
            raise ConfigurationError("P_sat must be positive")
        if not 0 < self.dilution <= 1:
            raise ConfigurationError("dilution must lie in (0, 1]")
        if self.pump.pulse_gate is not None and self.pump.pulse_gate > self.sweep.period:
            raise ConfigurationError(
                f"pulse_gate {self.pump.pulse_gate} ms longer than the cycle period {self.sweep.period} ms"
            )


@dataclass(frozen=True)
class FieldTrajectory:
    """Piecewise-linear B(t): knots in ms and mT."""

    times: Tuple[float, ...]
    fields: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "fields", tuple(float(b) for b in self.fields))
        if len(self.times) < 2 or len(self.times) != len(self.fields):
            raise ConfigurationError("trajectory needs at least two matching knots")
        if any(t1 <= t0 for t0, t1 in zip(self.times, self.times[1:])):
            raise ConfigurationError("trajectory times must be strictly increasing")
        if min(self.fields) < 0:
            raise ConfigurationError("trajectory fields must be non-negative")

    @classmethod
    def ramp(cls, b_start: float, b_stop: float, rate: float, t_start: float = 0.0) -> "FieldTrajectory":
        if not rate > 0:
            raise ConfigurationError(f"sweep rate must be positive, got {rate}")
        return cls((t_start, t_start + abs(b_stop - b_start) / rate), (b_start, b_stop))

    @classmethod
    def hold(cls, b_field: float, duration: float) -> "FieldTrajectory":
        return cls((0.0, duration), (b_field, b_field))

    def then(self, b_stop: float, duration: float) -> "FieldTrajectory":
        return FieldTrajectory(self.times + (self.times[-1] + duration,), self.fields + (b_stop,))

    @property
    def duration(self) -> float:
        return self.times[-1] - self.times[0]

    def field_at(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.fields)


@dataclass
class Trajectory:
    times: np.ndarray
    fields: np.ndarray
    states: Optional[np.ndarray]
    observed: Optional[np.ndarray]
    final: np.ndarray
    n_steps: int


@dataclass
class SweepResult:
    polarization: float
    direction: str
    rate: float
    times: np.ndarray
    fields: np.ndarray
    trace: np.ndarray

    columns = ["t_ms", "B_mT", "P_carbon"]

    def rows(self) -> List[List[float]]:
        return [[float(t), float(b), float(p)] for t, b, p in zip(self.times, self.fields, self.trace)]


@dataclass
class BuildupResult:
    times: np.ndarray
    polarization: np.ndarray
    injection_lh: float
    injection_hl: float
    buildup_time: float
    n_cycles: int
    repolarization: Tuple[float, float] = (1.0, 1.0)

    columns = ["t_ms", "P"]

    @property
    def final(self) -> float:
        return float(self.polarization[-1])

    def rows(self) -> List[List[float]]:
        return [[float(t), float(p)] for t, p in zip(self.times, self.polarization)]


# --- density matrices -------------------------------------------------------


def check_density_matrix(rho: np.ndarray, tol: float = 1e-9) -> None:
    """Raise ContractViolation unless rho is Hermitian, unit-trace and positive."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ContractViolation(f"density matrix must be square, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ContractViolation("density matrix is not Hermitian")
    trace = np.trace(rho).real
    if abs(trace - 1.0) > tol:
        raise ContractViolation(f"density matrix trace {trace!r} differs from 1")
    smallest = float(np.linalg.eigvalsh(rho).min())
    if smallest < -tol:
        raise ContractViolation(f"density matrix has negative eigenvalue {smallest:.3g}")


def _split(dims: Sequence[int], site: int) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if not 0 <= site < len(dims):
        raise ConfigurationError(f"site {site} outside 0..{len(dims) - 1}")
    pre = int(np.prod(dims[:site])) if site else 1
    post = int(np.prod(dims[site + 1:])) if site + 1 < len(dims) else 1
    return pre, dims[site], post


def reduced_state(rho: np.ndarray, site: int, dims: Sequence[int]) -> np.ndarray:
    pre, d, post = _split(dims, site)
    return np.einsum("aibajb->ij", rho.reshape(pre, d, post, pre, d, post))


def optical_reset(rho: np.ndarray, nv_site: int, dims: Sequence[int]) -> np.ndarray:
    """
    Replace the NV state by |m_s = 0><0|, keeping the rest of the system.

    Args:
        rho: Density matrix
        nv_site: Index of the spin-1 NV site
        dims: Site dimensions

    Returns:
        |0><0|_NV (x) Tr_NV(rho)
    """
    pre, d, post = _split(dims, nv_site)
    if d != 3:
        raise ConfigurationError(f"site {nv_site} is not a spin-1 NV (dimension {d})")
    tensor = rho.reshape(pre, 3, post, pre, 3, post)
    rest = np.einsum("aibcid->abcd", tensor)
    out = np.zeros_like(tensor)
    out[:, NV_BRIGHT_STATE, :, :, NV_BRIGHT_STATE, :] = rest
    return out.reshape(rho.shape)


def initial_state(dims: Sequence[int], nv_site: Optional[int] = 0) -> np.ndarray:
    """NV in |0>, every other spin maximally mixed."""
    dim = int(np.prod(dims))
    rho = np.eye(dim, dtype=complex) / dim
    if nv_site is None:
        return rho
    return optical_reset(rho, nv_site, dims)


def carbon_polarization(
    rho: np.ndarray,
    carbon_site: int,
    dims: Sequence[int],
    direction: Sequence[float] = (0.0, 0.0, 1.0),
) -> float:
    """
    Nuclear polarization Tr(rho 2 I_n) with n the field direction.

    Args:
        rho: Density matrix
        carbon_site: Index of the spin-1/2 nucleus
        dims: Site dimensions
        direction: Quantization axis (unit vector)

    Returns:
        Polarization in [-1, 1]
    """
    if dims[carbon_site] != 2:
        raise ConfigurationError(f"site {carbon_site} is not spin-1/2")
    sx, sy, sz = spin_operators(0.5)
    n = np.asarray(direction, dtype=float)
    observable = 2 * (n[0] * sx + n[1] * sy + n[2] * sz)
    return float(np.trace(reduced_state(rho, carbon_site, dims) @ observable).real)


def _spec_sites(system: SpinSystemSpec) -> Tuple[int, int]:
    return system.index_of(NV_LABEL), system.index_of(CARBON_LABEL)


def system_carbon_polarization(rho: np.ndarray, system: SpinSystemSpec) -> float:
    return carbon_polarization(rho, system.index_of(CARBON_LABEL), system.dims, system.field_direction)


def dephase(
    rho: np.ndarray,
    system: SystemLike,
    b_field: float,
    block_tol: float = config.DEPHASING_BLOCK_MHZ,
) -> np.ndarray:
    """
    Remove coherences between eigenstates of H(b_field) that are more than block_tol apart.

    Near-degenerate eigenstates form one block and keep their coherences.

    Args:
        rho: Density matrix
        system: Spin system or field-linear Hamiltonian
        b_field: Field defining the eigenbasis, mT
        block_tol: Largest level spacing inside a block, MHz

    Returns:
        Dephased density matrix
    """
    values, vectors = np.linalg.eigh(as_field_linear(system).at(b_field))
    blocks = np.concatenate(([0], np.cumsum(np.diff(values) > block_tol)))
    local = vectors.conj().T @ rho @ vectors
    local = np.where(blocks[:, None] == blocks[None, :], local, 0.0)
    rho = vectors @ local @ vectors.conj().T
    return (rho + rho.conj().T) / 2


# --- propagation ------------------------------------------------------------


def _step_edges(
    h: LinearFieldHamiltonian,
    trajectory: FieldTrajectory,
    step_tolerance: float,
    max_step_us: float,
    reset_times: np.ndarray,
) -> np.ndarray:
    slope_norm = float(np.max(np.abs(h.slope)))
    edges = [trajectory.times[0]]
    for t0, t1, b0, b1 in zip(trajectory.times, trajectory.times[1:], trajectory.fields, trajectory.fields[1:]):
        duration_us = (t1 - t0) * 1e3
        rate_us = abs(b1 - b0) / duration_us
        dt_us = max_step_us
        if rate_us > 0 and slope_norm > 0:
            dt_us = min(dt_us, math.sqrt(step_tolerance / (slope_norm * rate_us)))
        if dt_us * 1e-3 < config.MIN_STEP_MS:
            raise StiffnessError(f"step {dt_us * 1e-3:.3g} ms below floor {config.MIN_STEP_MS} ms")
        n = max(1, int(math.ceil(duration_us / dt_us)))
        edges.extend(np.linspace(t0, t1, n + 1)[1:])
        logger.debug(f"Segment {t0:.4g}-{t1:.4g} ms: {n} steps of {duration_us / n:.4g} us")

    edges = np.asarray(edges)
    if len(reset_times):
        edges = np.union1d(edges, reset_times)
        keep = np.concatenate(([True], np.diff(edges) > 1e-12))
        edges = edges[keep]
    return edges


def _reset_flags(edges: np.ndarray, reset_times: np.ndarray) -> np.ndarray:
    flags = np.zeros(len(edges) - 1, dtype=bool)
    if len(reset_times):
        index = np.searchsorted(edges, reset_times - 1e-12)
        index = index[(index >= 1) & (index < len(edges))]
        flags[index - 1] = True
    return flags


def propagate(
    rho0: np.ndarray,
    system: SystemLike,
    trajectory: FieldTrajectory,
    step_tolerance: float = config.STEP_TOLERANCE,
    pump: Optional[PumpSpec] = None,
    reset_times: Sequence[float] = (),
    nv_site: Optional[int] = None,
    observe: Optional[Callable[[np.ndarray], float]] = None,
    n_records: int = config.TRAJECTORY_RECORDS,
    max_step_us: float = config.MAX_STEP_US,
) -> Trajectory:
    """
    Propagate a density matrix along a piecewise-linear field trajectory.

    Each step applies the exact propagator of the Hamiltonian at the step
    midpoint. The step is sized so that ||H(t + dt) - H(t)||_max * dt stays
    below `step_tolerance`.

    Args:
        rho0: Initial density matrix
        system: Spin system or field-linear Hamiltonian
        trajectory: Field trajectory
        step_tolerance: Step controller tolerance, MHz us
        pump: Optical pumping during the trajectory
        reset_times: Extra NV reset times, ms
        nv_site: NV site for resets (default: the NV label of a SpinSystemSpec)
        observe: Scalar observable recorded instead of full states
        n_records: Number of recorded samples
        max_step_us: Upper bound on the step, us

    Returns:
        Trajectory with recorded samples and the final state
    """
    h = as_field_linear(system)
    rho = np.array(rho0, dtype=complex)
    if rho.shape != (h.dim, h.dim):
        raise ConfigurationError(f"state shape {rho.shape} does not match dimension {h.dim}")
    if not step_tolerance > 0:
        raise ConfigurationError("step_tolerance must be positive")

    if nv_site is None and isinstance(system, SpinSystemSpec) and system.has(NV_LABEL):
        nv_site = system.index_of(NV_LABEL)

    t_start, t_end = trajectory.times[0], trajectory.times[-1]
    resets = np.asarray(sorted(float(t) for t in reset_times if t_start < t <= t_end))
    if pump is not None and pump.mode == "stroboscopic":
        count = int(math.floor(trajectory.duration / pump.reset_interval + 1e-9))
        resets = np.union1d(resets, t_start + pump.reset_interval * np.arange(1, count + 1))
    if (len(resets) or pump is not None) and nv_site is None:
        raise ConfigurationError("optical pumping needs an NV site")

    edges = _step_edges(h, trajectory, step_tolerance, max_step_us, resets)
    flags = _reset_flags(edges, resets)
    n_steps = len(edges) - 1
    dt_us = np.diff(edges) * 1e3
    midfields = trajectory.field_at((edges[:-1] + edges[1:]) / 2)
    continuous = pump is not None and pump.mode == "continuous"

    record_at = set(np.unique(np.linspace(0, n_steps, max(n_records, 2)).round().astype(int)).tolist())
    times, fields, samples = [], [], []

    def record(index: int) -> None:
        times.append(edges[index])
        fields.append(trajectory.field_at(edges[index]))
        samples.append(observe(rho) if observe is not None else rho.copy())

    record(0)
    for start in range(0, n_steps, config.EIGH_CHUNK):
        stop = min(start + config.EIGH_CHUNK, n_steps)
        values, vectors = np.linalg.eigh(h.stack(midfields[start:stop]))
        phases = np.exp(-2j * np.pi * values * dt_us[start:stop, None])
        unitaries = (vectors * phases[:, None, :]) @ vectors.conj().transpose(0, 2, 1)

        for offset, u in enumerate(unitaries):
            step = start + offset
            rho = u @ rho @ u.conj().T
            rho = (rho + rho.conj().T) / 2
            if continuous:
                p = 1.0 - math.exp(-pump.pump_rate * dt_us[step] * 1e-3)
                rho = (1 - p) * rho + p * optical_reset(rho, nv_site, h.dims)
            if flags[step]:
                rho = optical_reset(rho, nv_site, h.dims)
            if step + 1 in record_at:
                record(step + 1)

    logger.debug(f"Propagated {n_steps} steps over {trajectory.duration:.4g} ms")
    return Trajectory(
        np.asarray(times),
        np.asarray(fields),
        None if observe is not None else np.asarray(samples),
        np.asarray(samples) if observe is not None else None,
        rho,
        n_steps,
    )


# --- sweep protocols --------------------------------------------------------


def transfer_crossings(
    system: SpinSystemSpec,
    b_range: Tuple[float, float],
    resolution: float = config.TRANSFER_SCAN_RESOLUTION_MT,
) -> List[Crossing]:
    """Avoided crossings in b_range whose gap lies between the transfer floor and ceiling."""
    report = find_crossings(system, (max(0.0, b_range[0]), b_range[1]), resolution=resolution)
    return [c for c in report.entries if config.TRANSFER_GAP_FLOOR_MHZ <= c.gap <= config.TRANSFER_GAP_CEILING_MHZ]


@lru_cache(maxsize=256)
def _crossing_fields(system: SpinSystemSpec, b_low: float, b_high: float) -> Tuple[float, ...]:
    return tuple(sorted({round(c.b_c, 6) for c in transfer_crossings(system, (b_low, b_high))}))


def _dephasing_fields(system: SpinSystemSpec, b_low: float, b_high: float) -> Tuple[float, ...]:
    fields = _crossing_fields(system, b_low, b_high)
    return tuple((a + b) / 2 for a, b in zip(fields, fields[1:]))


def crossing_window(system: SpinSystemSpec, half_width: float = config.SWEEP_HALF_WINDOW_MT) -> Tuple[float, float]:
    """
    Field window covering every transfer crossing near the matching field.

    Args:
        system: Spin system
        half_width: Margin around the outermost crossing, mT

    Returns:
        (B_low, B_high) in mT

    Raises:
        NoMatchingField: If there is no matching field or no crossing near it
    """
    center = matching_field(system.theta, max_theta=90.0)
    reach = max(abs(shift) for shift in motif_shifts(system).values()) + config.CROSSING_SEARCH_MARGIN_MT
    fields = _crossing_fields(system, max(0.0, center - reach), center + reach)
    if not fields:
        raise NoMatchingField(f"no avoided crossing within {reach:.3g} mT of {center:.4f} mT")
    return max(0.0, fields[0] - half_width), fields[-1] + half_width


def _p1_hyperfine_projection(system: SpinSystemSpec) -> Optional[float]:
    if not system.has(P1_NITROGEN_LABEL):
        return None
    site = system.index_of(P1_NITROGEN_LABEL)
    b_hat = system.field_direction
    for coupling in system.couplings:
        if site in coupling.pair:
            return float(b_hat @ coupling.matrix @ b_hat)
    return None


def motif_shifts(system: SpinSystemSpec) -> Dict[int, float]:
    """First-order field shift of the matching condition per P1 nitrogen projection, mT."""
    a_eff = _p1_hyperfine_projection(system)
    if a_eff is None:
        return {0: 0.0}
    return {m: -m * a_eff / (2 * abs(config.GAMMA_E)) for m in (-1, 0, 1)}


def _crossing_cluster_center(
    system: SpinSystemSpec,
    estimate: float,
    half_width: float = config.MOTIF_SEARCH_HALF_WIDTH_MT,
    gap_fraction: float = config.MOTIF_GAP_FRACTION,
) -> float:
    crossings = transfer_crossings(system, (estimate - half_width, estimate + half_width))
    if not crossings:
        logger.warning(f"No avoided crossing within {half_width} mT of {estimate:.4f} mT, keeping the estimate")
        return estimate
    widest = max(c.gap for c in crossings)
    strong = [c.b_c for c in crossings if c.gap >= gap_fraction * widest]
    return (min(strong) + max(strong)) / 2


def motif_centers(system: SpinSystemSpec) -> Dict[int, float]:
    """
    Center of each nitrogen-projection motif, mT.

    Starts from the first-order shift and moves to the midpoint of the strongest
    avoided crossings nearby, so higher-order hyperfine shifts are included.
    """
    center = matching_field(system.theta, max_theta=90.0)
    return {m: _crossing_cluster_center(system, center + shift) for m, shift in motif_shifts(system).items()}


def satellite_centers(system: SpinSystemSpec) -> Dict[int, float]:
    """Expected fields of the nitrogen-flip crossings (Delta m_I = -/+1) next to the central motif, mT."""
    a_eff = _p1_hyperfine_projection(system)
    if a_eff is None:
        return {}
    center = matching_field(system.theta, max_theta=90.0)
    offset = abs(a_eff) / (4 * abs(config.GAMMA_E))
    return {-1: center - offset, 1: center + offset}


def single_sweep_polarization(
    system: SpinSystemSpec,
    b_low: float,
    b_high: float,
    rate: float,
    direction: str = "up",
    step_tolerance: float = config.STEP_TOLERANCE,
    n_records: int = config.TRAJECTORY_RECORDS,
    phase_average: bool = True,
) -> SweepResult:
    """
    Carbon polarization after one linear sweep from an optically reset state.

    With `phase_average` the state is dephased in the local eigenbasis before the
    sweep, between consecutive avoided crossings and at the end, so each crossing
    acts as an incoherent Landau-Zener step.

    Args:
        system: Spin system with NV and 13C sites
        b_low: Lower field of the segment, mT
        b_high: Upper field of the segment, mT
        rate: Sweep rate, mT/ms
        direction: "up" (low to high) or "down"
        step_tolerance: Step controller tolerance
        n_records: Samples in the in-sweep trace
        phase_average: Average over crossing phases

    Returns:
        SweepResult with the final polarization and the trace P(B)
    """
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"direction must be 'up' or 'down', got {direction!r}")
    if not b_high > b_low:
        raise ConfigurationError(f"empty sweep segment {b_low}-{b_high} mT")

    nv_site, carbon_site = _spec_sites(system)
    start, stop = (b_low, b_high) if direction == "up" else (b_high, b_low)
    b_hat = system.field_direction

    def observe(rho: np.ndarray) -> float:
        return carbon_polarization(rho, carbon_site, system.dims, b_hat)

    rho = initial_state(system.dims, nv_site)
    knots = [start, stop]
    if phase_average:
        splits = _dephasing_fields(system, b_low, b_high)
        knots = [start, *(splits if direction == "up" else splits[::-1]), stop]
        rho = dephase(rho, system, start)

    times, fields, trace = [], [], []
    t_start = 0.0
    for b_from, b_to in zip(knots, knots[1:]):
        piece = propagate(
            rho,
            system,
            FieldTrajectory.ramp(b_from, b_to, rate, t_start),
            step_tolerance=step_tolerance,
            nv_site=nv_site,
            observe=observe,
            n_records=max(2, n_records // (len(knots) - 1)),
        )
        rho = dephase(piece.final, system, b_to) if phase_average else piece.final
        skip = 1 if times else 0
        times.extend(piece.times[skip:])
        fields.extend(piece.fields[skip:])
        trace.extend(piece.observed[skip:])
        t_start = piece.times[-1]

    polarization = observe(rho)
    logger.info(f"Single {direction}-sweep at {rate:.4g} mT/ms over {b_low:.3f}-{b_high:.3f} mT: P = {polarization:.6g}")
    return SweepResult(polarization, direction, rate, np.asarray(times), np.asarray(fields), np.asarray(trace))


def rate_scan(
    system: SpinSystemSpec,
    rates: Sequence[float],
    direction: str = "up",
    window: Optional[Tuple[float, float]] = None,
    step_tolerance: float = config.STEP_TOLERANCE,
) -> List[Tuple[float, float]]:
    """
    Single-sweep polarization for a list of rates.

    Args:
        system: Spin system
        rates: Sweep rates, mT/ms (at least 5, spanning two decades)
        direction: Sweep direction
        window: Sweep segment (default: crossing window)
        step_tolerance: Step controller tolerance

    Returns:
        (rate, P) rows in input order
    """
    rates = [float(r) for r in rates]
    if len(rates) < 5:
        raise ConfigurationError(f"rate scan needs at least 5 rates, got {len(rates)}")
    if min(rates) <= 0 or max(rates) / min(rates) < 100 * (1 - 1e-9):
        raise ConfigurationError("rates must be positive and span at least two decades")

    b_low, b_high = window or crossing_window(system)
    polarizations = parallel_map(
        lambda r: single_sweep_polarization(system, b_low, b_high, r, direction, step_tolerance, n_records=2).polarization,
        rates,
    )
    return list(zip(rates, polarizations))


@lru_cache(maxsize=1024)
def _cached_sweep(
    system: SpinSystemSpec, b_low: float, b_high: float, rate: float, direction: str, step_tolerance: float
) -> float:
    return single_sweep_polarization(system, b_low, b_high, rate, direction, step_tolerance, n_records=2).polarization


def segment_injection(
    system: SpinSystemSpec,
    rate: float,
    direction: str,
    window: Tuple[float, float],
    step_tolerance: float = config.STEP_TOLERANCE,
) -> float:
    """Single-sweep polarization of one segment direction at a rate, cached per window."""
    rate_key = float(format(rate, ".12g"))
    return _cached_sweep(system, window[0], window[1], rate_key, direction, step_tolerance)


def protocol_window(protocol: ProtocolSpec) -> Optional[Tuple[float, float]]:
    """
    Part of the swept range that holds the transfer crossings, with the protocol margin.

    Returns:
        (B_low, B_high) inside the sweep, or None when the sweep reaches no crossing
    """
    sweep = protocol.sweep
    fields = _crossing_fields(protocol.system, sweep.b_low, sweep.b_high)
    if not fields:
        return None
    return (
        max(sweep.b_low, fields[0] - protocol.window_half_width),
        min(sweep.b_high, fields[-1] + protocol.window_half_width),
    )


def segment_illumination(sweep: FieldSweepSpec, gate: Optional[float]) -> Tuple[float, float]:
    """
    Illuminated time of the up and down segments, ms.

    A gated pulse starts with the longer segment and may run into the shorter one.
    """
    if gate is None:
        return sweep.t_lh, sweep.t_hl
    if sweep.t_lh >= sweep.t_hl:
        return min(gate, sweep.t_lh), max(0.0, gate - sweep.t_lh)
    return max(0.0, gate - sweep.t_hl), min(gate, sweep.t_hl)


def repolarized_fraction(pump: PumpSpec, lit: float) -> float:
    """Fraction of a segment's transfer delivered with a repolarized NV, given its illuminated time."""
    if lit <= 0:
        return 0.0
    if pump.mode == "stroboscopic":
        return min(1.0, lit / pump.reset_interval)
    return -math.expm1(-pump.pump_rate * lit)


def multi_cycle_protocol(protocol: ProtocolSpec) -> BuildupResult:
    """
    Bulk polarization buildup over repeated saw-tooth cycles.

    Per cycle each segment injects its own single-sweep polarization over the
    crossings it traverses, weighted by how much of it runs with a repolarized
    NV and scaled by the dilution factor. The bulk value saturates at P_sat and
    leaks with T1n.

    Args:
        protocol: Protocol specification

    Returns:
        BuildupResult with P at every cycle boundary and the buildup time
    """
    sweep = protocol.sweep
    lit_lh, lit_hl = segment_illumination(sweep, protocol.pump.pulse_gate)
    f_lh = repolarized_fraction(protocol.pump, lit_lh)
    f_hl = repolarized_fraction(protocol.pump, lit_hl)

    p_lh = p_hl = 0.0
    window = protocol_window(protocol)
    if window is None:
        logger.warning(f"No avoided crossing between {sweep.b_low:.3f} and {sweep.b_high:.3f} mT, nothing is injected")
    else:
        if f_lh > 0:
            p_lh = f_lh * segment_injection(protocol.system, sweep.rate_lh, "up", window, protocol.step_tolerance)
        if f_hl > 0:
            p_hl = f_hl * segment_injection(protocol.system, sweep.rate_hl, "down", window, protocol.step_tolerance)

    n_cycles = int(math.floor(protocol.t_p / sweep.period + 1e-9))
    injection = protocol.dilution * (p_lh + p_hl)
    leak = sweep.period / protocol.t1n if protocol.t1n else 0.0

    polarization = np.empty(n_cycles + 1)
    polarization[0] = 0.0
    for k in range(n_cycles):
        p = polarization[k]
        polarization[k + 1] = p + injection * (1 - abs(p) / protocol.p_sat) - leak * p

    decay = abs(injection) / protocol.p_sat + leak
    if decay <= 0:
        buildup_time = math.inf
    elif decay >= 1:
        buildup_time = sweep.period
    else:
        buildup_time = -sweep.period / math.log(1 - decay)

    times = sweep.period * np.arange(n_cycles + 1)
    logger.info(
        f"Protocol t_LH={sweep.t_lh:.4g} ms t_HL={sweep.t_hl:.4g} ms: "
        f"p_LH={p_lh:.4g}, p_HL={p_hl:.4g}, P(t_p)={polarization[-1]:.4g}, buildup {buildup_time:.4g} ms"
    )
    return BuildupResult(times, polarization, p_lh, p_hl, buildup_time, n_cycles, (f_lh, f_hl))


def fraction_scan(protocol: ProtocolSpec, fractions: Sequence[float]) -> List[Tuple[float, float]]:
    """
    Final bulk polarization versus t_LH / t_c at fixed cycle period.

    Args:
        protocol: Template protocol (its sweep sets delta_B and t_c)
        fractions: Values of t_LH / t_c in (0, 1)

    Returns:
        (fraction, P(t_p)) rows
    """
    period = protocol.sweep.period
    rows = []
    for fraction in fractions:
        if not 0 < fraction < 1:
            raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
        sweep = FieldSweepSpec(
            protocol.sweep.b_center,
            protocol.sweep.delta_b,
            fraction * period,
            (1 - fraction) * period,
            protocol.sweep.n_cycles,
            protocol.sweep.start_direction,
        )
        result = multi_cycle_protocol(
            ProtocolSpec(
                protocol.system,
                sweep,
                protocol.pump,
                protocol.t_p,
                protocol.t1n,
                protocol.p_sat,
                protocol.dilution,
                protocol.window_half_width,
                protocol.step_tolerance,
            )
        )
        rows.append((float(fraction), result.final))
    return rows


def _static_spectrum_point(
    system: SpinSystemSpec, b_field: float, pump_cycles: int, tau_evol: float
) -> float:
    h = as_field_linear(system)
    nv_site, carbon_site = _spec_sites(system)
    values, vectors = np.linalg.eigh(h.at(b_field))
    u = (vectors * np.exp(-2j * np.pi * values * tau_evol * 1e3)) @ vectors.conj().T
    u_dag = u.conj().T

    rho = initial_state(system.dims, nv_site)
    for _ in range(pump_cycles):
        rho = optical_reset(u @ rho @ u_dag, nv_site, system.dims)
    return carbon_polarization(rho, carbon_site, system.dims, system.field_direction)


def dnp_spectrum(
    system: SpinSystemSpec,
    fields: Sequence[float],
    pump_cycles: int = config.PUMP_CYCLES,
    tau_evol: float = config.TAU_EVOL_MS,
) -> List[Tuple[float, float]]:
    """
    Static-field DNP spectrum: free evolution alternating with NV resets.

    Args:
        system: Spin system, normally NV-P1-N14(P1)-13C
        fields: Static fields B0, mT
        pump_cycles: Number of evolve/reset cycles
        tau_evol: Free evolution per cycle, ms

    Returns:
        (B0, P) rows in input order
    """
    if pump_cycles < 1:
        raise ConfigurationError("pump_cycles must be at least 1")
    if not tau_evol > 0:
        raise ConfigurationError("tau_evol must be positive")
    if not system.has(P1_NITROGEN_LABEL):
        logger.warning("DNP spectrum requested for a system without the P1 nitrogen")

    fields = [float(b) for b in fields]
    if not fields:
        raise ConfigurationError("DNP spectrum needs at least one field")
    if min(fields) < 0:
        raise ConfigurationError("fields must be non-negative")
    logger.info(f"DNP spectrum: {len(fields)} fields, {pump_cycles} cycles of {tau_evol * 1e3:.3g} us")
    values = parallel_map(lambda b: _static_spectrum_point(system, b, pump_cycles, tau_evol), fields)
    return list(zip(fields, values))


def motif_grid(
    system: SpinSystemSpec,
    half_width: float = 0.04,
    step: float = 0.001,
) -> List[float]:
    """Fine field grid around every predicted motif center, mT."""
    points = []
    offsets = np.arange(-half_width, half_width + step / 2, step)
    for center in motif_centers(system).values():
        points.extend(center + offsets)
    return sorted(set(round(b, 9) for b in points))


def spectrum_motifs(
    rows: Sequence[Tuple[float, float]],
    threshold_fraction: float = config.MOTIF_THRESHOLD_FRACTION,
    join: float = config.MOTIF_JOIN_MT,
) -> List[Tuple[float, float]]:
    """
    Sign-changing motifs of a DNP spectrum.

    Points with |P| of at least `threshold_fraction` of the largest |P| are
    grouped when neighbours lie within `join` mT; a group counts as a motif
    when it holds both signs.

    Args:
        rows: (B0, P) rows in any order
        threshold_fraction: Significance threshold relative to the peak
        join: Largest field gap inside a group, mT

    Returns:
        (B_first, B_last) of every motif, ascending
    """
    points = sorted((float(b), float(p)) for b, p in rows)
    peak = max((abs(p) for _, p in points), default=0.0)
    if peak == 0:
        return []
    significant = [(b, p) for b, p in points if abs(p) >= threshold_fraction * peak]

    groups = [[significant[0]]]
    for b, p in significant[1:]:
        if b - groups[-1][-1][0] <= join:
            groups[-1].append((b, p))
        else:
            groups.append([(b, p)])
    motifs = [
        (group[0][0], group[-1][0])
        for group in groups
        if any(p > 0 for _, p in group) and any(p < 0 for _, p in group)
    ]
    logger.debug(f"{len(motifs)} sign-changing motifs among {len(groups)} significant groups")
    return motifs


def range_scan_trajectory(
    b_start: float,
    delta_b: float,
    direction: str,
    slow_time: float,
    fast_time: float,
    n_cycles: int,
) -> FieldTrajectory:
    """Saw-tooth from b_start: slow excursion of delta_b in `direction`, fast return."""
    end = b_start + delta_b if direction == "up" else b_start - delta_b
    trajectory = FieldTrajectory((0.0, slow_time), (b_start, end))
    trajectory = trajectory.then(b_start, fast_time)
    for _ in range(n_cycles - 1):
        trajectory = trajectory.then(end, slow_time).then(b_start, fast_time)
    return trajectory


def sweep_range_scan(
    system: SpinSystemSpec,
    ranges: Sequence[float],
    direction: str = "up",
    b_start: Optional[float] = None,
    slow_time: float = config.CYCLE_PERIOD_MS * 10 / 11,
    fast_time: float = config.CYCLE_PERIOD_MS / 11,
    n_cycles: int = 3,
    pump: Optional[PumpSpec] = None,
    step_tolerance: float = config.STEP_TOLERANCE,
) -> List[Tuple[float, float]]:
    """
    Carbon polarization versus sweep range with the full state carried across cycles.

    The NV is reset at every reversal unless a pump is given, in which case the
    pump acts throughout. Nitrogen, P1 and carbon states are never reset.

    Args:
        system: Spin system, normally NV-P1-N14(P1)-13C
        ranges: Sweep ranges delta_B, mT
        direction: "up" starts at 46 mT, "down" at 56 mT by default
        b_start: Override of the start field, mT
        slow_time: Duration of the excursion, ms
        fast_time: Duration of the return, ms
        n_cycles: Number of cycles per range
        pump: Optional pumping during the whole run
        step_tolerance: Step controller tolerance

    Returns:
        (delta_B, P) rows in input order
    """
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"direction must be 'up' or 'down', got {direction!r}")
    if n_cycles < 1:
        raise ConfigurationError("n_cycles must be at least 1")
    if b_start is None:
        b_start = config.RANGE_SCAN_UP_START_MT if direction == "up" else config.RANGE_SCAN_DOWN_START_MT

    nv_site, carbon_site = _spec_sites(system)
    b_hat = system.field_direction

    def run(delta_b: float) -> float:
        if not delta_b > 0:
            raise ConfigurationError(f"sweep range must be positive, got {delta_b}")
        trajectory = range_scan_trajectory(b_start, delta_b, direction, slow_time, fast_time, n_cycles)
        reversals = trajectory.times[1:] if pump is None else ()
        result = propagate(
            initial_state(system.dims, nv_site),
            system,
            trajectory,
            step_tolerance=step_tolerance,
            pump=pump,
            reset_times=reversals,
            nv_site=nv_site,
            n_records=2,
            observe=lambda rho: 0.0,
        )
        polarization = carbon_polarization(result.final, carbon_site, system.dims, b_hat)
        logger.info(f"Range scan {direction} from {b_start} mT, dB = {delta_b} mT: P = {polarization:.6g}")
        return polarization

    ranges = [float(r) for r in ranges]
    return list(zip(ranges, parallel_map(run, ranges)))


# --- two-level Landau-Zener -------------------------------------------------


def landau_zener_probability(coupling: float, rate: float) -> float:
    """
    Diabatic transition probability exp(-4 pi^2 c^2 / v).

    Args:
        coupling: Half-gap c, MHz (gap = 2c)
        rate: Rate of change of the diabatic energy difference, MHz/us

    Returns:
        Probability of staying diabatic
    """
    if not rate > 0:
        raise ConfigurationError("rate must be positive")
    return math.exp(-4 * math.pi ** 2 * coupling ** 2 / rate)


def two_level_hamiltonian(coupling: float) -> LinearFieldHamiltonian:
    """Two-level toy with diabatic energies +/- B/2 and off-diagonal coupling c."""
    offset = np.array([[0.0, coupling], [coupling, 0.0]], dtype=complex)
    slope = np.diag([-0.5, 0.5]).astype(complex)
    offset.setflags(write=False)
    slope.setflags(write=False)
    return LinearFieldHamiltonian(offset, slope, (2,))


def two_level_sweep(
    coupling: float,
    rate: float,
    step_tolerance: float = 1e-4,
    span: Optional[float] = None,
) -> float:
    """
    Simulated diabatic transition probability of the two-level toy.

    Args:
        coupling: Half-gap c, MHz
        rate: Diabatic energy sweep rate, MHz/us
        step_tolerance: Step controller tolerance
        span: Half-width of the swept detuning, MHz

    Returns:
        Final population of the upper adiabatic state
    """
    if not (coupling > 0 and rate > 0):
        raise ConfigurationError("coupling and rate must be positive")
    h = two_level_hamiltonian(coupling)
    span = span or 200 * max(coupling, math.sqrt(rate))

    # detuning B runs -span..+span; shift to keep the field coordinate non-negative
    shifted = LinearFieldHamiltonian(
        h.offset - span * h.slope, h.slope, h.dims
    )
    trajectory = FieldTrajectory.ramp(0.0, 2 * span, rate * 1e3)

    _, start_vectors = np.linalg.eigh(shifted.at(0.0))
    lower = start_vectors[:, 0]
    rho0 = np.outer(lower, lower.conj())

    result = propagate(rho0, shifted, trajectory, step_tolerance=step_tolerance, n_records=2, observe=lambda rho: 0.0)
    _, end_vectors = np.linalg.eigh(shifted.at(2 * span))
    upper = end_vectors[:, 1]
    return float(np.real(upper.conj() @ result.final @ upper))
