"""
Spin operators, species presets and lab-frame Hamiltonians for NV/P1/nuclear clusters.

Energies are in MHz, fields in mT and distances in nm. Every species enters
with a Zeeman term -gamma * B * (B_hat . S) using its signed gyromagnetic
ratio, so electrons (gamma < 0) contribute +|gamma_e| * B * (B_hat . S) and the
NV |m_s = -1> branch descends with field.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from errors import ConfigurationError, ContractViolation, DegenerateGeometry

logger = logging.getLogger(__name__)

Vector = Tuple[float, float, float]
Tensor = Tuple[Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]]

NV_LABEL = "NV"
P1_LABEL = "P1"
P1_NITROGEN_LABEL = "N14_P1"
NV_NITROGEN_LABEL = "N14_NV"
CARBON_LABEL = "C13"


def _unit(vector: Sequence[float], what: str = "axis") -> Vector:
    v = np.asarray(vector, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ConfigurationError(f"{what} must be a finite 3-vector, got {vector!r}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ConfigurationError(f"{what} must be nonzero")
    return tuple(float(x) for x in v / norm)


def _freeze_tensor(tensor) -> Tensor:
    t = np.asarray(tensor, dtype=float)
    if t.shape != (3, 3):
        raise ConfigurationError(f"coupling tensor must be 3x3, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ConfigurationError("coupling tensor entries must be finite")
    return tuple(tuple(float(x) for x in row) for row in t)


@dataclass(frozen=True)
class SpinSpecies:
    label: str
    s: float
    gamma: float
    zero_field: float = 0.0
    hyperfine_axis: Vector = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.s not in (0.5, 1.0):
            raise ConfigurationError(f"species {self.label}: spin {self.s} not supported (1/2 or 1)")
        if not math.isfinite(self.gamma):
            raise ConfigurationError(f"species {self.label}: gamma must be finite")
        if not math.isfinite(self.zero_field):
            raise ConfigurationError(f"species {self.label}: zero_field must be finite")
        object.__setattr__(self, "hyperfine_axis", _unit(self.hyperfine_axis, f"{self.label} axis"))

    @property
    def dim(self) -> int:
        return int(round(2 * self.s + 1))


@dataclass(frozen=True)
class CouplingSpec:
    """Bilinear coupling S_i . A . S_j between two sites, tensor in MHz."""

    pair: Tuple[int, int]
    tensor: Tensor

    def __post_init__(self):
        i, j = (int(x) for x in self.pair)
        if i == j:
            raise ConfigurationError(f"coupling pair indices must differ, got {self.pair}")
        object.__setattr__(self, "pair", (i, j))
        object.__setattr__(self, "tensor", _freeze_tensor(self.tensor))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.tensor, dtype=float)


@dataclass(frozen=True)
class SpinSystemSpec:
    """
    Declarative spin cluster: ordered species, couplings and field orientation.

    `theta` is the angle between the applied field and the z axis of the lab
    frame (the default NV axis), `phi` its azimuth, both in degrees. `presets`
    records the scalar-to-tensor geometry choices for output metadata.
    """

    species: Tuple[SpinSpecies, ...]
    couplings: Tuple[CouplingSpec, ...] = ()
    theta: float = 0.0
    phi: float = 0.0
    presets: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        object.__setattr__(self, "presets", tuple(self.presets))

        if not self.species:
            raise ConfigurationError("spin system needs at least one species")
        if not 0.0 <= self.theta <= 90.0:
            raise ConfigurationError(f"theta must lie in [0, 90] degrees, got {self.theta}")
        if not math.isfinite(self.phi):
            raise ConfigurationError("phi must be finite")

        dimension = int(np.prod(self.dims))
        if dimension > config.MAX_HILBERT_DIM:
            raise ConfigurationError(
                f"Hilbert dimension {dimension} exceeds the limit {config.MAX_HILBERT_DIM}"
            )

        n = len(self.species)
        for coupling in self.couplings:
            if not all(0 <= index < n for index in coupling.pair):
                raise ConfigurationError(f"coupling pair {coupling.pair} outside 0..{n - 1}")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(sp.dim for sp in self.species)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(sp.label for sp in self.species)

    @property
    def field_direction(self) -> np.ndarray:
        return field_direction(self.theta, self.phi)

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigurationError(f"no site labelled {label!r} in {self.labels}") from None

    def has(self, label: str) -> bool:
        return label in self.labels

    def describe(self) -> Dict[str, object]:
        """Plain-data description used for hashing and metadata."""
        return {
            "species": [
                {
                    "label": sp.label,
                    "s": sp.s,
                    "gamma": sp.gamma,
                    "zero_field": sp.zero_field,
                    "axis": list(sp.hyperfine_axis),
                }
                for sp in self.species
            ],
            "couplings": [
                {"pair": list(c.pair), "tensor": [list(row) for row in c.tensor]}
                for c in self.couplings
            ],
            "theta": self.theta,
            "phi": self.phi,
            "presets": dict(self.presets),
        }


@dataclass(frozen=True, eq=False)
class LinearFieldHamiltonian:
    """H(B) = offset + B * slope, in MHz with B in mT."""

    offset: np.ndarray
    slope: np.ndarray
    dims: Tuple[int, ...]

    @property
    def dim(self) -> int:
        return int(self.offset.shape[0])

    def at(self, b_field: float) -> np.ndarray:
        return self.offset + b_field * self.slope

    def stack(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields, dtype=float)
        return self.offset[None, :, :] + fields[:, None, None] * self.slope[None, :, :]


SystemLike = Union[SpinSystemSpec, LinearFieldHamiltonian]


def field_direction(theta: float, phi: float = 0.0) -> np.ndarray:
    t = math.radians(theta)
    p = math.radians(phi)
    return np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])


@lru_cache(maxsize=None)
def _spin_matrices(s: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = np.arange(s, -s - 1, -1)
    plus = np.diag(np.sqrt(s * (s + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    sx = (plus + plus.T.conj()) / 2
    sy = (plus - plus.T.conj()) / 2j
    sz = np.diag(m).astype(complex)
    for matrix in (sx, sy, sz):
        matrix.setflags(write=False)
    return sx, sy, sz


def spin_operators(s: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Angular-momentum matrices in the |m = s>, ..., |m = -s> basis.

    Args:
        s: Spin quantum number, 1/2 or 1

    Returns:
        (Sx, Sy, Sz) as read-only complex arrays
    """
    if s not in (0.5, 1.0, 1):
        raise ConfigurationError(f"spin {s} not supported (1/2 or 1)")
    return _spin_matrices(float(s))


def embed(op: np.ndarray, site: int, dims: Sequence[int]) -> np.ndarray:
    """
    Lift a single-site operator onto the product space.

    Args:
        op: Operator on site `site`
        site: Site index in `dims`
        dims: Site dimensions in product order

    Returns:
        op acting on `site`, identity elsewhere
    """
    dims = list(dims)
    if not 0 <= site < len(dims):
        raise ConfigurationError(f"site {site} outside 0..{len(dims) - 1}")
    op = np.asarray(op)
    if op.shape != (dims[site], dims[site]):
        raise ConfigurationError(f"operator shape {op.shape} does not match site dimension {dims[site]}")

    left = int(np.prod(dims[:site])) if site else 1
    right = int(np.prod(dims[site + 1:])) if site + 1 < len(dims) else 1
    return np.kron(np.kron(np.eye(left), op), np.eye(right))


def dipolar_prefactor(gamma1: float, gamma2: float) -> float:
    """(mu0/4pi) h gamma1 gamma2 in MHz nm^3, gammas in MHz/mT."""
    return config.DIPOLAR_PREFACTOR * gamma1 * gamma2


def dipolar_tensor(r_vec: Sequence[float], gamma1: float, gamma2: float) -> np.ndarray:
    """
    Point-dipole coupling tensor between two spins.

    Args:
        r_vec: Inter-spin vector, nm
        gamma1: Gyromagnetic ratio of the first spin, MHz/mT
        gamma2: Gyromagnetic ratio of the second spin, MHz/mT

    Returns:
        3x3 traceless tensor in MHz

    Raises:
        DegenerateGeometry: If the distance is below the lattice cutoff
    """
    r = np.asarray(r_vec, dtype=float)
    distance = float(np.linalg.norm(r))
    if not distance > config.MIN_PAIR_DISTANCE_NM:
        raise DegenerateGeometry(
            f"pair distance {distance:.4g} nm below {config.MIN_PAIR_DISTANCE_NM} nm"
        )
    n = r / distance
    return dipolar_prefactor(gamma1, gamma2) / distance ** 3 * (np.eye(3) - 3 * np.outer(n, n))


def pair_axis(polar_angle: float, azimuth: float = 0.0) -> np.ndarray:
    return field_direction(polar_angle, azimuth)


def preset_dipolar(
    coupling: float,
    gamma1: float,
    gamma2: float,
    polar_angle: float = config.PRESET_ANGLE_DEG,
    azimuth: float = 0.0,
) -> np.ndarray:
    """
    Point-dipole tensor for a quoted scalar coupling.

    The pair axis sits at `polar_angle` from z and the tensor is scaled so that
    |T_zz| equals `coupling`, keeping the sign of gamma1 * gamma2.

    Args:
        coupling: Scalar coupling, MHz (> 0)
        gamma1: First gyromagnetic ratio, MHz/mT
        gamma2: Second gyromagnetic ratio, MHz/mT
        polar_angle: Pair axis polar angle, degrees
        azimuth: Pair axis azimuth, degrees

    Returns:
        3x3 tensor in MHz
    """
    if not coupling > 0:
        raise ConfigurationError(f"preset coupling must be positive, got {coupling}")
    n = pair_axis(polar_angle, azimuth)
    shape = np.eye(3) - 3 * np.outer(n, n)
    if abs(shape[2, 2]) < 1e-9:
        raise DegenerateGeometry(f"pair axis at {polar_angle} deg has vanishing zz element")
    return math.copysign(1.0, gamma1 * gamma2) * coupling / abs(shape[2, 2]) * shape


def axial_tensor(a_par: float, a_perp: float, axis: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    n = np.asarray(_unit(axis))
    return a_perp * np.eye(3) + (a_par - a_perp) * np.outer(n, n)


def nv_center(axis: Sequence[float] = (0.0, 0.0, 1.0)) -> SpinSpecies:
    return SpinSpecies(NV_LABEL, 1.0, config.GAMMA_E, config.NV_ZERO_FIELD, tuple(axis))


def p1_center() -> SpinSpecies:
    return SpinSpecies(P1_LABEL, 0.5, config.GAMMA_E)


def carbon13() -> SpinSpecies:
    return SpinSpecies(CARBON_LABEL, 0.5, config.GAMMA_C13)


def nitrogen14(
    label: str,
    quadrupole: float = config.N14_QUADRUPOLE,
    axis: Sequence[float] = (0.0, 0.0, 1.0),
) -> SpinSpecies:
    return SpinSpecies(label, 1.0, config.GAMMA_N14, quadrupole, tuple(axis))


def cluster_system(
    d_nv_p1: float = config.D_NV_P1,
    d_nv_c: Optional[float] = config.D_NV_C,
    theta: float = 0.0,
    phi: float = 0.0,
    nv_p1_angle: float = config.TRIO_NV_P1_ANGLE_DEG,
    nv_c_angle: float = config.TRIO_NV_C_ANGLE_DEG,
    carbon_partner: str = "nv",
    p1_nitrogen: bool = False,
    nv_nitrogen: bool = False,
    p1_hyperfine: Tuple[float, float] = (config.P1_N14_A_PAR, config.P1_N14_A_PERP),
    p1_axis: Sequence[float] = (0.0, 0.0, 1.0),
    nv_hyperfine: float = config.NV_N14_A_ISO,
    quadrupole: float = config.N14_QUADRUPOLE,
    p1_secular: bool = False,
) -> SpinSystemSpec:
    """
    Build an NV-P1 cluster with optional host nitrogens and a 13C.

    Site order: NV, P1, [N14 of P1], [N14 of NV], [13C].

    Args:
        d_nv_p1: NV-P1 scalar coupling, MHz
        d_nv_c: 13C scalar coupling to its partner, MHz (None for no carbon)
        theta: Field angle to the NV axis, degrees
        phi: Field azimuth, degrees
        nv_p1_angle: NV-P1 pair axis polar angle, degrees
        nv_c_angle: Carbon pair axis polar angle, degrees
        carbon_partner: "nv" or "p1"
        p1_nitrogen: Include the P1 host nitrogen
        nv_nitrogen: Include the NV host nitrogen
        p1_hyperfine: (A_par, A_perp) of the P1 nitrogen, MHz
        p1_axis: Symmetry axis of the P1 hyperfine tensor
        nv_hyperfine: Isotropic NV nitrogen hyperfine, MHz
        quadrupole: Nitrogen quadrupole term, MHz
        p1_secular: Keep only the P1 hyperfine part along the field (no electron flip-flops)

    Returns:
        Validated SpinSystemSpec
    """
    if carbon_partner not in ("nv", "p1"):
        raise ConfigurationError(f"carbon_partner must be 'nv' or 'p1', got {carbon_partner!r}")

    species: List[SpinSpecies] = [nv_center(), p1_center()]
    couplings: List[CouplingSpec] = [
        CouplingSpec((0, 1), preset_dipolar(d_nv_p1, config.GAMMA_E, config.GAMMA_E, nv_p1_angle))
    ]
    presets: List[Tuple[str, float]] = [("d_nv_p1_MHz", d_nv_p1), ("nv_p1_angle_deg", nv_p1_angle)]

    if p1_nitrogen:
        species.append(nitrogen14(P1_NITROGEN_LABEL, quadrupole, p1_axis))
        tensor = axial_tensor(*p1_hyperfine, axis=p1_axis)
        if p1_secular:
            b_hat = field_direction(theta, phi)
            tensor = np.outer(b_hat, b_hat) @ tensor
        couplings.append(CouplingSpec((1, len(species) - 1), tensor))
    if nv_nitrogen:
        species.append(nitrogen14(NV_NITROGEN_LABEL, quadrupole))
        couplings.append(CouplingSpec((0, len(species) - 1), nv_hyperfine * np.eye(3)))
    if d_nv_c is not None:
        species.append(carbon13())
        partner = 0 if carbon_partner == "nv" else 1
        couplings.append(
            CouplingSpec(
                (partner, len(species) - 1),
                preset_dipolar(d_nv_c, config.GAMMA_E, config.GAMMA_C13, nv_c_angle),
            )
        )
        presets += [("d_c_MHz", d_nv_c), ("c_angle_deg", nv_c_angle)]

    return SpinSystemSpec(tuple(species), tuple(couplings), theta, phi, tuple(presets))


def trio_system(d_nv_p1: float = config.D_NV_P1, d_nv_c: float = config.D_NV_C, **kwargs) -> SpinSystemSpec:
    """NV-P1-13C trio (dim 12)."""
    return cluster_system(d_nv_p1, d_nv_c, **kwargs)


def quartet_system(d_nv_p1: float = config.D_NV_P1, d_nv_c: float = config.D_NV_C, **kwargs) -> SpinSystemSpec:
    """NV-P1-N14(P1)-13C (dim 36)."""
    return cluster_system(d_nv_p1, d_nv_c, p1_nitrogen=True, **kwargs)


def full_system(d_nv_p1: float = config.D_NV_P1, d_nv_c: float = config.D_NV_C, **kwargs) -> SpinSystemSpec:
    """NV-P1 with both host nitrogens and a 13C (dim 108)."""
    return cluster_system(d_nv_p1, d_nv_c, p1_nitrogen=True, nv_nitrogen=True, **kwargs)


def lone_nv(theta: float = 0.0, phi: float = 0.0) -> SpinSystemSpec:
    return SpinSystemSpec((nv_center(),), (), theta, phi)


def lone_p1(theta: float = 0.0, phi: float = 0.0) -> SpinSystemSpec:
    return SpinSystemSpec((p1_center(),), (), theta, phi)


@lru_cache(maxsize=64)
def field_linear_hamiltonian(spec: SpinSystemSpec) -> LinearFieldHamiltonian:
    """
    Split the Hamiltonian into its field-independent and field-linear parts.

    Args:
        spec: Spin system

    Returns:
        LinearFieldHamiltonian with read-only offset and slope, MHz and MHz/mT
    """
    dims = spec.dims
    dim = spec.dim
    b_hat = spec.field_direction

    ops = []
    for site, sp in enumerate(spec.species):
        ops.append([embed(m, site, dims) for m in spin_operators(sp.s)])

    offset = np.zeros((dim, dim), dtype=complex)
    slope = np.zeros((dim, dim), dtype=complex)

    for site, sp in enumerate(spec.species):
        sx, sy, sz = ops[site]
        if sp.zero_field:
            n = sp.hyperfine_axis
            s_axis = n[0] * sx + n[1] * sy + n[2] * sz
            offset += sp.zero_field * (s_axis @ s_axis)
        slope -= sp.gamma * (b_hat[0] * sx + b_hat[1] * sy + b_hat[2] * sz)

    for coupling in spec.couplings:
        i, j = coupling.pair
        tensor = coupling.matrix
        for a in range(3):
            for b in range(3):
                if tensor[a, b] != 0.0:
                    offset += tensor[a, b] * (ops[i][a] @ ops[j][b])

    offset = (offset + offset.conj().T) / 2
    slope = (slope + slope.conj().T) / 2
    offset.setflags(write=False)
    slope.setflags(write=False)

    logger.debug(f"Built field-linear Hamiltonian of dimension {dim} for sites {spec.labels}")
    return LinearFieldHamiltonian(offset, slope, dims)


def as_field_linear(system: SystemLike) -> LinearFieldHamiltonian:
    if isinstance(system, LinearFieldHamiltonian):
        return system
    if isinstance(system, SpinSystemSpec):
        return field_linear_hamiltonian(system)
    raise ConfigurationError(f"expected a spin system, got {type(system).__name__}")


def build_hamiltonian(spec: SpinSystemSpec, b_field: float) -> np.ndarray:
    """
    Lab-frame Hamiltonian H/h in MHz at field magnitude `b_field` (mT).

    Args:
        spec: Spin system
        b_field: Field magnitude, mT (>= 0)

    Returns:
        Dense Hermitian matrix
    """
    if not (math.isfinite(b_field) and b_field >= 0):
        raise ConfigurationError(f"field must be finite and non-negative, got {b_field}")
    return field_linear_hamiltonian(spec).at(b_field)


def check_hermitian(matrix: np.ndarray, what: str = "operator", tol: float = config.HERMITICITY_TOL) -> None:
    """Raise ContractViolation unless ||H - H^dag||_max <= tol * ||H||_max."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContractViolation(f"{what} must be square, got shape {matrix.shape}")
    scale = float(np.max(np.abs(matrix))) if matrix.size else 0.0
    defect = float(np.max(np.abs(matrix - matrix.conj().T))) if matrix.size else 0.0
    if defect > tol * max(scale, 1e-300):
        raise ContractViolation(f"{what} is not Hermitian (defect {defect:.3g}, scale {scale:.3g})")
