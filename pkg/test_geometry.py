#!/usr/bin/env python3
"""
Tests for Monte Carlo defect placement and the distance, coupling and cluster statistics.
"""

import math

import numpy as np
import pytest

import config
from errors import ConfigurationError
from geometry import (
    ClusterRule,
    DefectEnsembleSpec,
    cluster_distribution,
    coupling_magnitude,
    coupling_stats,
    ks_distance,
    mean_distance_vs_concentration,
    nn_distance_stats,
    poisson_nn_mean,
    ppm_to_density,
    sample_ensemble,
)


def mean_size(pmf):
    return sum(n * p for n, p in pmf.items())


def test_ppm_conversion():
    assert ppm_to_density(1.0) == pytest.approx(1.763e-4)
    assert config.PPM_TO_DENSITY == pytest.approx(1.763e-4)


def test_same_seed_gives_identical_ensemble():
    spec = DefectEnsembleSpec(50.0, 10.0, seed=42)
    first = sample_ensemble(spec)
    second = sample_ensemble(spec)
    assert np.array_equal(first.positions, second.positions)
    assert np.array_equal(first.is_nv, second.is_nv)
    assert not np.array_equal(first.positions, sample_ensemble(DefectEnsembleSpec(50.0, 10.0, seed=43)).positions)


def test_positions_inside_periodic_box():
    ensemble = sample_ensemble(DefectEnsembleSpec(50.0, 10.0, seed=1))
    assert np.all(ensemble.positions >= 0.0)
    assert np.all(ensemble.positions < ensemble.box_edge)
    expected = (50.0 + 10.0) * config.PPM_TO_DENSITY * ensemble.box_edge ** 3
    assert len(ensemble.positions) == pytest.approx(expected, rel=0.1)


def test_box_too_small_rejected():
    with pytest.raises(ConfigurationError):
        DefectEnsembleSpec(50.0, 10.0, box_edge=5.0)


def test_nearest_distance_matches_poisson_law():
    spec = DefectEnsembleSpec(50.0, 10.0, seed=5)
    stats = nn_distance_stats(spec, 10000)
    assert stats.mean == pytest.approx(poisson_nn_mean(spec.p1_density), rel=0.02)
    assert ks_distance(stats.distances, spec.p1_density) < 0.02
    widths = np.diff(stats.bin_edges)
    assert np.all(widths <= 0.2 + 1e-12)
    assert np.sum(stats.density * widths) == pytest.approx(1.0)


def test_distance_stats_preconditions():
    spec = DefectEnsembleSpec(50.0, 10.0)
    with pytest.raises(ConfigurationError):
        nn_distance_stats(spec, 500)
    with pytest.raises(ConfigurationError):
        nn_distance_stats(spec, 10000, bin_width=0.5)


def test_lattice_placement_close_to_continuum():
    spec = DefectEnsembleSpec(50.0, 10.0, target_count=500, placement="lattice", seed=2)
    stats = nn_distance_stats(spec, 2000)
    assert stats.distances.min() > 0.1
    assert stats.mean == pytest.approx(poisson_nn_mean(spec.p1_density), rel=0.05)


def test_coupling_magnitude():
    assert float(coupling_magnitude(2.35)) == pytest.approx(4.0, rel=0.01)


def test_mean_coupling_dominated_by_close_pairs():
    spec = DefectEnsembleSpec(50.0, 10.0, seed=9)
    stats = coupling_stats(spec, 5000)
    distance = nn_distance_stats(spec, 5000).mean
    assert stats.mean > float(coupling_magnitude(distance))
    assert stats.median < stats.mean


def test_cluster_mode_is_pair():
    spec = DefectEnsembleSpec(50.0, 10.0, target_count=500, seed=11)
    pmf = cluster_distribution(spec, ClusterRule(), 1000)
    assert sum(pmf.values()) == pytest.approx(1.0)
    assert min(pmf) >= 2
    assert max(pmf, key=pmf.get) == 2


def test_dilute_clusters_are_pairs():
    spec = DefectEnsembleSpec(0.2, 0.04, target_count=500, seed=11)
    pmf = cluster_distribution(spec, ClusterRule(), 1000)
    assert pmf[2] >= 0.95


def test_cluster_size_grows_with_concentration():
    means = []
    for ppm in (10.0, 50.0, 200.0):
        spec = DefectEnsembleSpec(ppm, ppm / 5, target_count=500, seed=13)
        means.append(mean_size(cluster_distribution(spec, ClusterRule(), 1000)))
    assert means[0] < means[1] < means[2]


def test_strict_threshold_shrinks_clusters():
    spec = DefectEnsembleSpec(50.0, 10.0, target_count=500, seed=17)
    loose = mean_size(cluster_distribution(spec, ClusterRule(threshold_fraction=0.5), 1000))
    strict = mean_size(cluster_distribution(spec, ClusterRule(threshold_fraction=1.0), 1000))
    assert strict < loose


def test_cluster_rule_validation():
    with pytest.raises(ConfigurationError):
        ClusterRule(threshold_fraction=1.5)
    with pytest.raises(ConfigurationError):
        ClusterRule(pairs="p1_p1")
    with pytest.raises(ConfigurationError):
        cluster_distribution(DefectEnsembleSpec(50.0, 10.0), ClusterRule(), 10)


def test_mean_distance_scales_as_inverse_cube_root():
    rows = mean_distance_vs_concentration([1.0, 10.0, 100.0], ratio=5.0, n_samples=5000)
    ppm = np.array([row[0] for row in rows])
    mean = np.array([row[1] for row in rows])
    assert np.all(np.diff(mean) < 0)
    slope = np.polyfit(np.log(ppm), np.log(mean), 1)[0]
    assert slope == pytest.approx(-1 / 3, rel=0.05)


def test_curve_requires_ascending_concentrations():
    with pytest.raises(ConfigurationError):
        mean_distance_vs_concentration([10.0, 1.0])


def test_poisson_mean_closed_form():
    density = ppm_to_density(50.0)
    expected = math.gamma(4 / 3) * (4 * math.pi * density / 3) ** (-1 / 3)
    assert poisson_nn_mean(density) == pytest.approx(expected)
