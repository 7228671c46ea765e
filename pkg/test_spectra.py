#!/usr/bin/env python3
"""
Tests for level diagrams, avoided-crossing search and the matching field.
"""

import math

import numpy as np
import pytest

import config
from errors import ConfigurationError, NoMatchingField
from spectra import (
    eigenlevels,
    find_crossings,
    level_diagram,
    matching_curve,
    matching_field,
    orientation_cone,
    track_branches,
)
from spinsys import LinearFieldHamiltonian, cluster_system, trio_system

CROSSING_WINDOW = (50.8, 51.6)


def shifted_two_level(coupling: float, center: float) -> LinearFieldHamiltonian:
    """Diabatic levels -(B - center)/2 and +(B - center)/2 coupled by `coupling`."""
    offset = np.array([[center / 2, coupling], [coupling, -center / 2]], dtype=complex)
    slope = np.diag([-0.5, 0.5]).astype(complex)
    return LinearFieldHamiltonian(offset, slope, (2,))


@pytest.mark.parametrize("coupling", [0.01, 0.1, 1.0])
def test_two_level_gap_is_twice_coupling(coupling):
    report = find_crossings(shifted_two_level(coupling, 1.0), (0.0, 2.0))
    assert len(report.entries) == 1
    crossing = report.entries[0]
    assert crossing.b_c == pytest.approx(1.0, abs=1e-5)
    assert crossing.gap == pytest.approx(2 * coupling, rel=1e-6)
    assert report.delta1 == crossing


def test_trio_gap_hierarchy():
    report = find_crossings(trio_system(), CROSSING_WINDOW)
    assert report.delta1 is not None and report.delta0 is not None
    assert report.delta1.gap < report.delta0.gap
    for gap in (report.delta0.gap, report.delta1.gap):
        assert 0.01 <= gap <= 1.0
    assert abs(report.delta1.b_c - 51.2) < 0.2


def test_pair_gap_scales_with_coupling():
    weak = find_crossings(cluster_system(d_nv_p1=0.5, d_nv_c=None), CROSSING_WINDOW)
    strong = find_crossings(cluster_system(d_nv_p1=1.0, d_nv_c=None), CROSSING_WINDOW)
    assert strong.delta1.gap > weak.delta1.gap
    assert strong.delta1.gap / weak.delta1.gap == pytest.approx(2.0, rel=0.1)


def test_crossing_resolution_limit():
    with pytest.raises(ConfigurationError):
        find_crossings(trio_system(), CROSSING_WINDOW, resolution=0.05)


def test_matching_field_zero_angle():
    analytic = config.NV_ZERO_FIELD / (2 * abs(config.GAMMA_E))
    assert matching_field(0.0) == pytest.approx(analytic, abs=1e-4)
    assert matching_field(0.0) == pytest.approx(51.21, abs=0.05)


def test_matching_field_grows_with_angle():
    curve = matching_curve([0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0])
    fields = [b for _, b in curve]
    assert all(b > a for a, b in zip(fields, fields[1:]))
    assert matching_field(13.0) > 51.21


def test_matching_field_angle_limit():
    with pytest.raises(ConfigurationError):
        matching_field(60.0)
    with pytest.raises(NoMatchingField):
        matching_field(60.0, max_theta=90.0)
    with pytest.raises(ConfigurationError):
        matching_field(95.0, max_theta=120.0)


def test_orientation_cone_for_wide_sweep():
    cone = orientation_cone(config.FIG5_SWEEP_RANGE_MT)
    assert 15.0 < cone["theta_max_deg"] < 30.0
    assert cone["B_m_edge_mT"] - matching_field(0.0) == pytest.approx(config.FIG5_SWEEP_RANGE_MT, abs=0.01)
    assert cone["solid_angle_fraction"] == pytest.approx(1 - math.cos(math.radians(cone["theta_max_deg"])))


def test_level_diagram_is_deterministic():
    first = level_diagram(trio_system(), CROSSING_WINDOW, 41)
    second = level_diagram(trio_system(), CROSSING_WINDOW, 41)
    assert np.array_equal(first.energies, second.energies)
    assert first.metadata["spec_hash"] == second.metadata["spec_hash"]
    assert first.columns[0] == "B_mT"
    assert len(first.columns) == 13
    assert np.all(np.diff(first.energies, axis=1) >= 0)


def test_eigenlevels_fix_phases():
    values, vectors = eigenlevels(np.array([[1.0, 0.5j], [-0.5j, 1.0]]))
    assert values == pytest.approx([0.5, 1.5])
    for k in range(2):
        pivot = vectors[0, k]
        assert pivot.imag == pytest.approx(0.0, abs=1e-12)
        assert pivot.real > 0


def test_branch_tracking_follows_diabatic_levels():
    system = shifted_two_level(1e-4, 1.05)
    diagram = level_diagram(system, (0.0, 2.0), 21, track=True)
    fields = diagram.fields
    assert np.allclose(diagram.energies[:, 0], (fields - 1.05) / 2, atol=1e-6)

    sorted_diagram = level_diagram(system, (0.0, 2.0), 21, with_vectors=True)
    assert np.allclose(sorted_diagram.energies[:, 0], -np.abs(fields - 1.05) / 2, atol=1e-6)
    perm = track_branches(sorted_diagram)
    assert perm[0].tolist() == [0, 1]
    assert perm[-1].tolist() == [1, 0]


def test_track_branches_needs_vectors():
    diagram = level_diagram(trio_system(), CROSSING_WINDOW, 5)
    with pytest.raises(ConfigurationError):
        track_branches(diagram)
