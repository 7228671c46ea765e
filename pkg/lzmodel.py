"""
Closed-form sweep-rate transfer model P = g * q * (1 - Q) and its least-squares fit.

Gaps are in kHz, k in kHz^2, rates in mT/ms (= T/s). Exponents are evaluated
in coherent SI frequency units with |gamma_e| in Hz/T.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

import config
from errors import ConfigurationError, DegenerateData, DegenerateModel, DomainError, FitFailed

logger = logging.getLogger(__name__)

GAMMA_E_HZ_PER_T = abs(config.GAMMA_E) * 1e9
KHZ2_TO_S2 = 1e6

RATE_BOUNDS = (1e-3, 1e2)

# multistart grid: Delta1 (kHz), Delta0/Delta1 - 1, k (kHz^2)
START_DELTA1 = (10.0, 30.0, 100.0)
START_RATIO_EXCESS = (2.0, 9.0, 30.0)
START_K = (10.0, 1e3, 1e5)


@dataclass(frozen=True)
class LZParams:
    delta0: float
    delta1: float
    k: float
    p_m: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.delta0, self.delta1, self.k, self.p_m)):
            raise ConfigurationError("model parameters must be finite")
        if not self.delta0 > self.delta1 > 0:
            raise ConfigurationError(f"need delta0 > delta1 > 0, got {self.delta0}, {self.delta1}")
        if not self.k > 0:
            raise ConfigurationError(f"k must be positive, got {self.k}")

    def as_dict(self) -> Dict[str, float]:
        return {"delta0_kHz": self.delta0, "delta1_kHz": self.delta1, "k_kHz2": self.k, "p_m": self.p_m}


@dataclass(frozen=True)
class RateCurve:
    rates: Tuple[float, ...]
    values: Tuple[float, ...]
    sigma: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
            if len(self.sigma) != len(self.rates) or min(self.sigma) <= 0:
                raise ConfigurationError("sigma must be positive and match the rates")
        if len(self.rates) != len(self.values):
            raise ConfigurationError("rates and values must have equal length")
        if not self.rates or min(self.rates) <= 0:
            raise ConfigurationError("rates must be strictly positive")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ConfigurationError("rates must be strictly increasing")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "RateCurve":
        rows = sorted(rows, key=lambda row: row[0])
        sigma = tuple(row[2] for row in rows) if rows and all(len(row) > 2 for row in rows) else None
        return cls(tuple(row[0] for row in rows), tuple(row[1] for row in rows), sigma)


class Components(NamedTuple):
    q_wide: Any
    q_narrow: Any
    g: Any
    p: Any


@dataclass
class FitResult:
    params: LZParams
    residuals: np.ndarray
    rms: float
    converged: bool
    start_index: int
    n_starts: int
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.as_dict(),
            "residuals": [float(r) for r in self.residuals],
            "rms": self.rms,
            "converged": self.converged,
            "start_index": self.start_index,
            "n_starts": self.n_starts,
            "diagnostics": self.diagnostics,
        }


def eval_components(params: LZParams, rate) -> Components:
    """
    Evaluate Q, q, g and P at one or more sweep rates.

    Args:
        params: Model parameters
        rate: Sweep rate(s), mT/ms

    Returns:
        Components(Q, q, g, P), scalars or arrays matching `rate`
    """
    r = np.asarray(rate, dtype=float)
    if np.any(~(r > 0)):
        raise DomainError(f"sweep rate must be positive, got {rate!r}")

    sweep = GAMMA_E_HZ_PER_T * r
    q_wide = np.exp(-(params.delta0 * 1e3) ** 2 / sweep)
    q_narrow = np.exp(-(params.delta1 * 1e3) ** 2 / sweep) * (1 - q_wide)
    g = params.p_m * -np.expm1(-sweep / (params.k * KHZ2_TO_S2))
    p = g * q_narrow * (1 - q_wide)

    if r.ndim == 0:
        return Components(float(q_wide), float(q_narrow), float(g), float(p))
    return Components(q_wide, q_narrow, g, p)


def transfer(params: LZParams, rate) -> Any:
    return eval_components(params, rate).p


def argmax_rate(params: LZParams, bounds: Tuple[float, float] = RATE_BOUNDS, n_grid: int = 2001) -> float:
    """
    Sweep rate maximizing |P|.

    Args:
        params: Model parameters
        bounds: Rate interval, mT/ms
        n_grid: Points of the log grid

    Returns:
        Optimum rate in mT/ms (tolerance 1e-3)
    """
    if params.p_m == 0:
        raise DegenerateModel("p_m = 0 gives an identically zero curve")

    grid = np.logspace(math.log10(bounds[0]), math.log10(bounds[1]), n_grid)
    magnitude = np.abs(transfer(params, grid))
    if not np.any(magnitude > 0):
        raise DegenerateModel("model is zero over the whole rate interval")

    best = int(np.argmax(magnitude))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, n_grid - 1)]
    result = minimize_scalar(
        lambda x: -abs(transfer(params, math.exp(x))),
        bounds=(math.log(lo), math.log(hi)),
        method="bounded",
        options={"xatol": 1e-4},
    )
    rate = float(math.exp(result.x))
    logger.debug(f"Optimum rate {rate:.5g} mT/ms")
    return rate


def _unpack(x: np.ndarray) -> LZParams:
    delta1 = math.exp(x[0])
    return LZParams(delta1 * (1 + math.exp(x[1])), delta1, math.exp(x[2]), float(x[3]))


def _pack(params: LZParams) -> np.ndarray:
    return np.array(
        [
            math.log(params.delta1),
            math.log(params.delta0 / params.delta1 - 1),
            math.log(params.k),
            params.p_m,
        ]
    )


def _start_points(rates: np.ndarray, values: np.ndarray, weights: np.ndarray, init: Optional[LZParams], count: int):
    shapes = []
    if init is not None:
        shapes.append((init.delta0, init.delta1, init.k))
    for delta1, excess, k in itertools.product(START_DELTA1, START_RATIO_EXCESS, START_K):
        shapes.append((delta1 * (1 + excess), delta1, k))

    starts = []
    for delta0, delta1, k in shapes[:count]:
        shape = transfer(LZParams(delta0, delta1, k, 1.0), rates)
        denom = float(np.sum((weights * shape) ** 2))
        p_m = float(np.sum(weights ** 2 * shape * values) / denom) if denom > 0 else float(np.max(np.abs(values)))
        if init is not None and len(starts) == 0:
            p_m = init.p_m
        starts.append(_pack(LZParams(delta0, delta1, k, p_m or 1.0)))
    return starts


def fit(
    data: RateCurve,
    init: Optional[LZParams] = None,
    multistart: int = 27,
    max_nfev: int = 5000,
) -> FitResult:
    """
    Multistart least-squares fit of the transfer model.

    Args:
        data: Measured or simulated rate curve
        init: Optional first start point
        multistart: Number of start points from the log grid
        max_nfev: Function-evaluation budget per start

    Returns:
        FitResult with the best parameters, residuals and diagnostics

    Raises:
        DegenerateData: If the data are all zero or too few
        FitFailed: If no start converged
    """
    rates = np.asarray(data.rates)
    values = np.asarray(data.values)
    if len(rates) < 4:
        raise DegenerateData(f"need at least 4 points, got {len(rates)}")
    if not np.any(values != 0):
        raise DegenerateData("all data values are zero")
    if multistart < 1:
        raise ConfigurationError("multistart must be at least 1")

    weights = 1.0 / np.asarray(data.sigma) if data.sigma is not None else np.ones_like(values)

    def residual(x: np.ndarray) -> np.ndarray:
        try:
            model = transfer(_unpack(x), rates)
        except (ConfigurationError, OverflowError):
            return np.full_like(values, 1e6)
        return weights * (model - values)

    starts = _start_points(rates, values, weights, init, multistart + (1 if init else 0))

    def run(indexed):
        index, x0 = indexed
        with np.errstate(over="ignore", under="ignore"):
            result = least_squares(
                residual, x0, method="trf", x_scale="jac", ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=max_nfev
            )
        return index, result

    with ThreadPoolExecutor(max_workers=max(1, min(config.THREADS, len(starts)))) as pool:
        outcomes = list(pool.map(run, enumerate(starts)))

    outcomes.sort(key=lambda item: (float(item[1].cost), item[0]))
    converged = [item for item in outcomes if item[1].success]
    index, best = (converged or outcomes)[0]

    params = _unpack(best.x)
    residuals = transfer(params, rates) - values
    result = FitResult(
        params=params,
        residuals=residuals,
        rms=float(np.sqrt(np.mean(residuals ** 2))),
        converged=bool(best.success),
        start_index=index,
        n_starts=len(starts),
        diagnostics={
            "cost": float(best.cost),
            "nfev": int(best.nfev),
            "status": int(best.status),
            "message": str(best.message),
            "converged_starts": len(converged),
        },
    )

    if not converged:
        raise FitFailed(f"none of {len(starts)} starts converged", best=result)

    logger.info(
        f"Fit: delta0={params.delta0:.4g} kHz delta1={params.delta1:.4g} kHz "
        f"k={params.k:.4g} kHz^2 p_m={params.p_m:.4g}, rms {result.rms:.3g} (start {index})"
    )
    return result
