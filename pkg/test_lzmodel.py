#!/usr/bin/env python3
"""
Tests for the closed-form sweep-rate model and its multistart fit.
"""

import math

import numpy as np
import pytest

from errors import ConfigurationError, DegenerateData, DegenerateModel, DomainError
from lzmodel import LZParams, RateCurve, argmax_rate, eval_components, fit, transfer

REFERENCE = LZParams(delta0=250.0, delta1=30.0, k=15.0, p_m=13.0)


def test_wide_gap_factor_at_reference_rate():
    components = eval_components(REFERENCE, 0.4)
    assert components.q_wide == pytest.approx(math.exp(-5.575), rel=1e-3)
    assert components.q_wide == pytest.approx(3.8e-3, rel=0.02)


def test_components_vectorize():
    rates = np.array([0.1, 0.4, 1.0])
    components = eval_components(REFERENCE, rates)
    assert components.p.shape == (3,)
    assert components.p[1] == pytest.approx(transfer(REFERENCE, 0.4))


def test_optimum_rate():
    assert argmax_rate(REFERENCE) == pytest.approx(0.45, abs=0.05)


def test_narrow_gap_exponent_scales_with_gap_squared():
    doubled = LZParams(250.0, 60.0, 15.0, 13.0)
    base = -math.log(eval_components(REFERENCE, 0.4).q_narrow / (1 - eval_components(REFERENCE, 0.4).q_wide))
    wide = -math.log(eval_components(doubled, 0.4).q_narrow / (1 - eval_components(doubled, 0.4).q_wide))
    assert wide == pytest.approx(4 * base, rel=1e-9)


def test_sign_of_amplitude_flips_curve():
    flipped = LZParams(250.0, 30.0, 15.0, -13.0)
    rates = np.logspace(-2, 1, 7)
    assert np.allclose(transfer(flipped, rates), -transfer(REFERENCE, rates))
    assert argmax_rate(flipped) == pytest.approx(argmax_rate(REFERENCE), rel=1e-3)


def test_nonpositive_rate_rejected():
    with pytest.raises(DomainError):
        eval_components(REFERENCE, 0.0)
    with pytest.raises(DomainError):
        transfer(REFERENCE, np.array([0.1, -1.0]))


def test_zero_amplitude_is_degenerate():
    with pytest.raises(DegenerateModel):
        argmax_rate(LZParams(250.0, 30.0, 15.0, 0.0))


def test_parameter_validation():
    with pytest.raises(ConfigurationError):
        LZParams(30.0, 250.0, 15.0, 13.0)
    with pytest.raises(ConfigurationError):
        LZParams(250.0, 30.0, -1.0, 13.0)


def test_noiseless_fit_recovers_parameters():
    truth = LZParams(delta0=250.0, delta1=30.0, k=2000.0, p_m=13.0)
    rates = np.logspace(-2, math.log10(5.0), 30)
    data = RateCurve(tuple(rates), tuple(transfer(truth, rates)))

    result = fit(data)
    assert result.converged
    assert result.params.delta0 == pytest.approx(truth.delta0, rel=0.05)
    assert result.params.delta1 == pytest.approx(truth.delta1, rel=0.05)
    assert result.params.k == pytest.approx(truth.k, rel=0.05)
    assert result.params.p_m == pytest.approx(truth.p_m, rel=0.05)
    assert result.rms < 1e-4
    assert result.n_starts == 27


def test_noisy_fits_recover_gap_and_amplitude():
    truth = LZParams(delta0=250.0, delta1=30.0, k=2000.0, p_m=13.0)
    rates = np.logspace(-2, math.log10(2.5), 20)
    clean = transfer(truth, rates)

    delta0_errors, p_m_errors = [], []
    for trial in range(50):
        rng = np.random.default_rng([2024, trial])
        noisy = clean * (1 + 0.05 * rng.standard_normal(len(rates)))
        params = fit(RateCurve(tuple(rates), tuple(noisy))).params
        delta0_errors.append(abs(params.delta0 / truth.delta0 - 1))
        p_m_errors.append(abs(params.p_m / truth.p_m - 1))

    for errors in (np.array(delta0_errors), np.array(p_m_errors)):
        assert np.median(errors) <= 0.1
        assert np.mean(errors <= 0.2) >= 0.9


def test_fit_rejects_degenerate_data():
    rates = (0.1, 0.2, 0.5, 1.0)
    with pytest.raises(DegenerateData):
        fit(RateCurve(rates, (0.0, 0.0, 0.0, 0.0)))
    with pytest.raises(DegenerateData):
        fit(RateCurve(rates[:3], (1.0, 2.0, 1.0)))


def test_rate_curve_from_rows_sorts_and_reads_sigma():
    curve = RateCurve.from_rows([[1.0, 2.0, 0.1], [0.5, 1.0, 0.1], [2.0, 0.5, 0.2]])
    assert curve.rates == (0.5, 1.0, 2.0)
    assert curve.sigma == (0.1, 0.1, 0.2)
    with pytest.raises(ConfigurationError):
        RateCurve((0.5, 0.5), (1.0, 1.0))
