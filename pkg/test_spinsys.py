#!/usr/bin/env python3
"""
Tests for spin operators, dipolar tensors and the cluster Hamiltonian.
"""

import numpy as np
import pytest

import config
from errors import ConfigurationError, ContractViolation, DegenerateGeometry
from spinsys import (
    P1_NITROGEN_LABEL,
    CouplingSpec,
    SpinSpecies,
    SpinSystemSpec,
    build_hamiltonian,
    check_hermitian,
    cluster_system,
    dipolar_tensor,
    embed,
    field_linear_hamiltonian,
    full_system,
    lone_nv,
    nv_center,
    preset_dipolar,
    quartet_system,
    spin_operators,
    trio_system,
)


@pytest.mark.parametrize("s", [0.5, 1.0])
def test_spin_operator_algebra(s):
    """[Sx, Sy] = i Sz and S^2 = s(s+1)."""
    sx, sy, sz = spin_operators(s)
    assert np.allclose(sx @ sy - sy @ sx, 1j * sz)
    total = sx @ sx + sy @ sy + sz @ sz
    assert np.allclose(total, s * (s + 1) * np.eye(int(2 * s + 1)))


def test_unsupported_spin_rejected():
    with pytest.raises(ConfigurationError):
        spin_operators(1.5)
    with pytest.raises(ConfigurationError):
        SpinSpecies("X", 1.5, 1.0)


def test_embed_places_operator_on_site():
    dims = (3, 2, 2)
    sz = spin_operators(0.5)[2]
    lifted = embed(sz, 1, dims)
    assert lifted.shape == (12, 12)
    assert np.trace(lifted) == pytest.approx(0.0)
    assert np.allclose(embed(np.eye(3), 0, dims), np.eye(12))
    # first basis state is |+1, +1/2, +1/2>
    assert lifted[0, 0] == pytest.approx(0.5)

    with pytest.raises(ConfigurationError):
        embed(sz, 0, dims)
    with pytest.raises(ConfigurationError):
        embed(sz, 3, dims)


def test_dipolar_tensor_electron_pair():
    """Two electrons 1 nm apart along z: T_zz = -2 * 52.04 MHz."""
    tensor = dipolar_tensor((0.0, 0.0, 1.0), config.GAMMA_E, config.GAMMA_E)
    assert tensor[2, 2] == pytest.approx(-104.08, rel=1e-3)
    assert np.trace(tensor) == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(tensor, tensor.T)

    at_distance = dipolar_tensor((0.0, 0.0, 4.8), config.GAMMA_E, config.GAMMA_E)
    assert abs(at_distance[2, 2]) == pytest.approx(0.94, rel=0.01)


def test_dipolar_tensor_rejects_short_distance():
    with pytest.raises(DegenerateGeometry):
        dipolar_tensor((0.0, 0.0, 0.1), config.GAMMA_E, config.GAMMA_E)


def test_preset_dipolar_scaled_to_quoted_coupling():
    tensor = preset_dipolar(0.5, config.GAMMA_E, config.GAMMA_E, 32.0)
    assert abs(tensor[2, 2]) == pytest.approx(0.5)
    assert np.trace(tensor) == pytest.approx(0.0, abs=1e-12)

    with pytest.raises(DegenerateGeometry):
        preset_dipolar(0.5, config.GAMMA_E, config.GAMMA_E, float(np.degrees(np.arccos(1 / np.sqrt(3)))))
    with pytest.raises(ConfigurationError):
        preset_dipolar(-1.0, config.GAMMA_E, config.GAMMA_E)


def test_preset_dimensions():
    assert trio_system().dims == (3, 2, 2)
    assert trio_system().dim == 12
    assert quartet_system().dim == 36
    assert full_system().dim == 108
    assert cluster_system(d_nv_c=None, p1_nitrogen=True, nv_nitrogen=True).dim == 54


def test_dimension_limit():
    species = tuple(nv_center() for _ in range(6))
    with pytest.raises(ConfigurationError):
        SpinSystemSpec(species)


def test_theta_range_enforced():
    with pytest.raises(ConfigurationError):
        trio_system(theta=95.0)


def test_hamiltonian_hermitian_and_field_linear():
    spec = trio_system(theta=10.0)
    h0 = build_hamiltonian(spec, 0.0)
    h1 = build_hamiltonian(spec, 51.2)
    h2 = build_hamiltonian(spec, 102.4)
    check_hermitian(h1)
    assert np.allclose(h2 - 2 * h1 + h0, 0.0, atol=1e-9)

    linear = field_linear_hamiltonian(spec)
    assert not linear.offset.flags.writeable
    assert np.allclose(linear.at(51.2), h1)


def test_negative_field_rejected():
    with pytest.raises(ConfigurationError):
        build_hamiltonian(trio_system(), -1.0)


def test_lone_nv_levels():
    """D Sz^2 + |gamma_e| B Sz at theta = 0."""
    b = 10.0
    energies = np.linalg.eigvalsh(build_hamiltonian(lone_nv(), b))
    zeeman = abs(config.GAMMA_E) * b
    expected = sorted([0.0, config.NV_ZERO_FIELD - zeeman, config.NV_ZERO_FIELD + zeeman])
    assert np.allclose(energies, expected, atol=1e-9)


def test_lone_nv_minus_one_branch_descends():
    e_low = np.linalg.eigvalsh(build_hamiltonian(lone_nv(), 40.0))
    e_high = np.linalg.eigvalsh(build_hamiltonian(lone_nv(), 50.0))
    assert e_high[1] < e_low[1]


def test_field_orientation_invariance_of_spectrum():
    """Rotating the field azimuth about the NV axis leaves the lone-NV spectrum unchanged."""
    a = np.linalg.eigvalsh(build_hamiltonian(lone_nv(theta=20.0, phi=0.0), 30.0))
    b = np.linalg.eigvalsh(build_hamiltonian(lone_nv(theta=20.0, phi=70.0), 30.0))
    assert np.allclose(a, b, atol=1e-9)


def rotation_y(angle: float) -> np.ndarray:
    a = np.radians(angle)
    return np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])


def test_tilted_field_matches_counter_rotated_frame():
    """A field at theta to the NV axis gives the spectrum of an NV frame rotated by -theta."""
    theta = 30.0
    tilted = trio_system(theta=theta)
    r = rotation_y(-theta)
    species = (nv_center(tuple(r @ np.array([0.0, 0.0, 1.0]))),) + tilted.species[1:]
    couplings = tuple(CouplingSpec(c.pair, r @ c.matrix @ r.T) for c in tilted.couplings)
    rotated = SpinSystemSpec(species, couplings, 0.0)

    for b in (51.0, 51.2, 52.0):
        expected = np.linalg.eigvalsh(build_hamiltonian(tilted, b))
        actual = np.linalg.eigvalsh(build_hamiltonian(rotated, b))
        assert np.allclose(actual, expected, atol=1e-9 * np.max(np.abs(expected)))


def test_secular_p1_hyperfine_conserves_nitrogen_projection():
    secular = quartet_system(p1_secular=True)
    full = quartet_system()
    site = secular.index_of(P1_NITROGEN_LABEL)
    iz = embed(spin_operators(1.0)[2], site, secular.dims)

    h = build_hamiltonian(secular, 51.2)
    assert np.allclose(h @ iz - iz @ h, 0.0, atol=1e-9)
    h_full = build_hamiltonian(full, 51.2)
    assert not np.allclose(h_full @ iz - iz @ h_full, 0.0, atol=1e-6)

    coupling = next(c for c in secular.couplings if site in c.pair)
    assert np.allclose(coupling.matrix, np.diag([0.0, 0.0, config.P1_N14_A_PAR]))


def test_check_hermitian_rejects_asymmetric():
    with pytest.raises(ContractViolation):
        check_hermitian(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_describe_is_plain_data():
    spec = trio_system()
    description = spec.describe()
    assert [sp["label"] for sp in description["species"]] == ["NV", "P1", "C13"]
    assert description["presets"]["d_nv_p1_MHz"] == 0.5
