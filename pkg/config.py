import os
import logging
import math

from scipy import constants

# Tool identity
TOOL_NAME = "dnpr"
TOOL_VERSION = "0.1.0"
SCHEMA_VERSION = 1

# Gyromagnetic ratios, MHz/mT, signed (Zeeman term is -gamma * B * (n . S))
GAMMA_E = -28.0249
GAMMA_C13 = 0.0107084
GAMMA_N14 = 0.0030766
GAMMA_C13_MHZ_PER_T = GAMMA_C13 * 1e3

# NV ground-state zero-field splitting, MHz
NV_ZERO_FIELD = 2870.0

# Nitrogen host hyperfine defaults, MHz
P1_N14_A_PAR = 114.0
P1_N14_A_PERP = 81.3
NV_N14_A_ISO = 3.0
N14_QUADRUPOLE = 0.0

# Bundled couplings for the NV-P1-13C trio, MHz
D_NV_P1 = 0.5
D_NV_C = 0.92

# Scalar-coupling presets: pair axis polar angle, degrees
PRESET_ANGLE_DEG = 45.0
# Bundled trio geometry (gives Delta0 ~ 250 kHz, Delta1 ~ 30 kHz)
TRIO_NV_P1_ANGLE_DEG = 32.0
TRIO_NV_C_ANGLE_DEG = 14.0

# Hilbert space and geometry limits
MAX_HILBERT_DIM = 256
MIN_PAIR_DISTANCE_NM = 0.15
HERMITICITY_TOL = 1e-9

# Point-dipole prefactor (mu0/4pi) h gamma1 gamma2 in MHz nm^3 for gammas in MHz/mT
DIPOLAR_PREFACTOR = constants.mu_0 / (4 * math.pi) * constants.h * 1e39
C_EE = DIPOLAR_PREFACTOR * GAMMA_E * GAMMA_E

# Spectra
CROSSING_SCAN_RESOLUTION_MT = 0.01
CROSSING_XTOL_MT = 1e-6
GAP_PROMINENCE_MHZ = 1e-6
MATCHING_BRACKET_MT = (0.0, 200.0)
MATCHING_XTOL_MT = 1e-6
MATCHING_MAX_THETA_DEG = 50.0

# Dynamics (times in ms unless suffixed _US)
STEP_TOLERANCE = 1e-3
MIN_STEP_MS = 1e-9
MAX_STEP_US = 10.0
EIGH_CHUNK = 2048
RESET_INTERVAL_MS = 0.001
TAU_EVOL_MS = 0.01
PUMP_CYCLES = 200
T1N_MS = 5000.0
P_SAT = 1.0
INJECTION_DILUTION = 1e-3
SWEEP_HALF_WINDOW_MT = 0.5
TRANSFER_GAP_FLOOR_MHZ = 1e-3
TRANSFER_GAP_CEILING_MHZ = 5.0
TRANSFER_SCAN_RESOLUTION_MT = 0.002
CROSSING_SEARCH_MARGIN_MT = 1.0
DEPHASING_BLOCK_MHZ = 0.01
TRAJECTORY_RECORDS = 400

# DNP spectrum motifs
MOTIF_SEARCH_HALF_WIDTH_MT = 0.3
MOTIF_GAP_FRACTION = 0.5
MOTIF_THRESHOLD_FRACTION = 0.1
MOTIF_JOIN_MT = 0.2

# Protocol anchors
SWEEP_RANGE_MT = 6.0
CYCLE_PERIOD_MS = 20.3
PUMP_TIME_MS = 10000.0
FIG5_SWEEP_RANGE_MT = 8.6
FIG5_CYCLE_PERIOD_MS = 23.0
RANGE_SCAN_UP_START_MT = 46.0
RANGE_SCAN_DOWN_START_MT = 56.0

# Geometry
CARBON_DENSITY_NM3 = 176.3
PPM_TO_DENSITY = CARBON_DENSITY_NM3 * 1e-6
DIAMOND_LATTICE_NM = 0.35668
ENSEMBLE_TARGET_COUNT = 2000
CLUSTER_THRESHOLD_FRACTION = 0.5
CLUSTER_COUPLING_FLOOR_MHZ = 1.0

# Environment


def parse_threads(value: str) -> int:
    """
    Worker count from a DNPR_THREADS value; empty, zero or invalid means all CPUs.

    Args:
        value: Raw environment value

    Returns:
        Positive worker count
    """
    try:
        threads = int(value or 0)
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring DNPR_THREADS={value!r}: not an integer")
        threads = 0
    return threads if threads > 0 else (os.cpu_count() or 1)


THREADS = parse_threads(os.getenv("DNPR_THREADS", ""))
LOG_LEVEL = os.getenv("DNPR_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("DNPR_LOG_FILE", "")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = LOG_LEVEL) -> None:
    """
    Configure root logging for command-line runs.

    Args:
        level: Logging level name
    """
    handlers = [logging.StreamHandler()]
    if LOG_FILE:
        handlers.append(logging.FileHandler(LOG_FILE))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
