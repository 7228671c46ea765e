"""Thermal polarization and DNP enhancement arithmetic."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from scipy import constants

import config
from errors import ConfigurationError

logger = logging.getLogger(__name__)

REFERENCE_FIELD_T = 9.0
REFERENCE_TEMPERATURE_K = 300.0


def thermal_polarization(
    field_t: float,
    temperature_k: float = REFERENCE_TEMPERATURE_K,
    gamma_mhz_per_t: float = config.GAMMA_C13_MHZ_PER_T,
) -> float:
    """
    Boltzmann polarization of a spin-1/2, tanh(h gamma B / 2 k_B T).

    Args:
        field_t: Magnetic field, T
        temperature_k: Temperature, K
        gamma_mhz_per_t: Gyromagnetic ratio, MHz/T

    Returns:
        Polarization (odd in B)
    """
    if not temperature_k > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature_k}")
    energy = constants.h * gamma_mhz_per_t * 1e6 * field_t
    return math.tanh(energy / (2 * constants.k * temperature_k))


@dataclass
class EnhancementReport:
    local_polarization: float
    sensitivity_gain: float
    p_thermal: float
    inputs: Dict[str, Any] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def rows(self) -> List[List[Any]]:
        rows = [
            ["p_thermal", self.p_thermal, "dimensionless"],
            ["local_polarization", self.local_polarization, "dimensionless"],
            ["sensitivity_gain", self.sensitivity_gain, "dimensionless"],
        ]
        if self.inputs.get("quoted_gain") is not None:
            rows.append(["quoted_gain", self.inputs["quoted_gain"], "dimensionless"])
        return rows

    columns = ["quantity", "value", "unit"]

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def enhancement_report(
    epsilon: float,
    fill_fraction: float,
    t_dnp: float,
    t_thermal: float,
    p_thermal: Optional[float] = None,
    quoted_gain: Optional[float] = None,
) -> EnhancementReport:
    """
    Local polarization and time-averaged sensitivity gain from a measured enhancement.

    Args:
        epsilon: Measured signal enhancement over thermal
        fill_fraction: Illuminated fraction of the sample, (0, 1]
        t_dnp: Time per DNP repeat, s
        t_thermal: Time per thermal repeat, s
        p_thermal: Thermal polarization (default: 13C at 9 T, 300 K)
        quoted_gain: Externally quoted gain echoed next to the computed one

    Returns:
        EnhancementReport with the inputs echoed
    """
    if not (epsilon > 0 and t_dnp > 0 and t_thermal > 0):
        raise ConfigurationError("epsilon, t_dnp and t_thermal must be positive")
    if not 0 < fill_fraction <= 1:
        raise ConfigurationError(f"fill_fraction must lie in (0, 1], got {fill_fraction}")

    notes = []
    if p_thermal is None:
        p_thermal = thermal_polarization(REFERENCE_FIELD_T, REFERENCE_TEMPERATURE_K)
        notes.append(f"p_thermal from 13C at {REFERENCE_FIELD_T} T and {REFERENCE_TEMPERATURE_K} K")
    if not p_thermal > 0:
        raise ConfigurationError("p_thermal must be positive")

    report = EnhancementReport(
        local_polarization=epsilon * p_thermal / fill_fraction,
        sensitivity_gain=epsilon * math.sqrt(t_thermal / t_dnp),
        p_thermal=p_thermal,
        inputs={
            "epsilon": epsilon,
            "fill_fraction": fill_fraction,
            "t_dnp_s": t_dnp,
            "t_thermal_s": t_thermal,
            "quoted_gain": quoted_gain,
        },
        notes=notes,
    )
    if quoted_gain is not None and abs(quoted_gain - report.sensitivity_gain) > 0.1 * quoted_gain:
        message = f"computed gain {report.sensitivity_gain:.4g} differs from quoted {quoted_gain:.4g}"
        report.notes.append(message)
        logger.warning(message)

    logger.info(
        f"Enhancement {epsilon}: local polarization {report.local_polarization:.4g}, "
        f"gain {report.sensitivity_gain:.4g}"
    )
    return report
