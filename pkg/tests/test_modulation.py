import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soliton_lab.grid_model import gauge, mass, pairing
from soliton_lab.modulation import (ModulationCoords, OutOfNeighborhood, charge_gradient, compose,
                                    coordinate_gradients, decompose, omega_form, poisson_bracket,
                                    random_physical_field, random_state, symplectic_suite)


@pytest.fixture(scope="module")
def suite(well_family):
    return {c.name: c for c in symplectic_suite(well_family, n_states=6, seed=3, n_pairs=20)}


@pytest.mark.parametrize("name", [
    "{Q,theta}=1", "{Q,omega}=0", "{Q,z}=0", "bracket table", "X_Q=-d/dtheta",
    "{f,omega},{f,theta}", "Omega=Omega0 at R=0", "Omega(d_theta,d_omega)=iq'+a1",
    "{F,G}=i Omega(X_F,X_G)", "grad omega closed form", "decompose o compose"])
def test_symplectic_identity(suite, name):
    c = suite[name]
    assert c.passed, f"{name}: {c.max_error:.3e} > {c.tolerance:.0e}"


def test_decompose_pure_ground_state(well_family):
    w, th = well_family.omega0 + 0.04, 0.7
    pt = well_family.at(w)
    c = decompose(gauge(pt.Phi, th), well_family)
    assert c.omega == pytest.approx(w, abs=1e-11)
    assert c.theta == pytest.approx(th, abs=1e-11)
    assert np.max(np.abs(c.z)) < 1e-11
    assert np.max(np.abs(c.f)) < 1e-10


def test_decompose_recovers_internal_mode_amplitude(well_family):
    pt = well_family.reference
    z = np.array([0.01 - 0.02j])
    U = pt.Phi + z[0] * pt.xis[0] + np.conj(z[0]) * np.stack([pt.xis[0][1], pt.xis[0][0]])
    c = decompose(U, well_family)
    # first-order agreement; the orthogonality conditions shift omega at O(|z|^2)
    assert abs(c.z[0] - z[0]) < 5e-4
    assert abs(c.omega - pt.omega) < 5e-4


def test_remainder_is_symplectically_orthogonal(well_family, rng):
    coords = random_state(well_family, rng, 1e-2, omega_offset=0.2)
    c = decompose(compose(coords, well_family), well_family)
    pt = well_family.at(c.omega)
    R = gauge(compose(c, well_family), -c.theta) - pt.Phi
    assert abs(pairing(R, pt.Phi, pt.grid)) < 1e-10
    assert abs(pairing(R, np.stack([pt.dPhi[0], -pt.dPhi[1]]), pt.grid)) < 1e-10


def test_coordinate_gradients_match_finite_differences(well_family, rng):
    coords = random_state(well_family, rng, 1e-2, omega_offset=0.2)
    U = compose(coords, well_family)
    c0 = decompose(U, well_family, guess=coords)
    frame = coordinate_gradients(c0, well_family)
    g = well_family.grid
    V = random_physical_field(g, rng)
    h = 1e-5
    cp = decompose(U + h * V, well_family, guess=c0)
    cm = decompose(U - h * V, well_family, guess=c0)
    for fd, grad in (((cp.omega - cm.omega) / (2 * h), frame.grad_omega),
                     ((cp.theta - cm.theta) / (2 * h), frame.grad_theta),
                     ((cp.z[0] - cm.z[0]) / (2 * h), frame.grad_z[0])):
        assert abs(fd - pairing(grad, V, g)) < 1e-6


def test_charge_gradient_matches_finite_difference(well_family, rng):
    g = well_family.grid
    U, V = random_physical_field(g, rng), random_physical_field(g, rng)
    h = 1e-6
    fd = (mass(U + h * V, g) - mass(U - h * V, g)) / (2 * h)
    assert abs(fd - pairing(charge_gradient(U), V, g)) < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_two_form_and_bracket_are_antisymmetric(seed):
    from soliton_lab.grid_model import Grid
    rng = np.random.default_rng(seed)
    g = Grid("line1d", 64, 10.0)
    X, Y = random_physical_field(g, rng), random_physical_field(g, rng)
    assert abs(omega_form(X, X, g)) < 1e-12
    assert abs(omega_form(X, Y, g) + omega_form(Y, X, g)) < 1e-12
    assert abs(poisson_bracket(X, Y, g) + poisson_bracket(Y, X, g)) < 1e-12


def test_far_state_is_rejected(well_family, rng):
    pt = well_family.reference
    U = pt.Phi + 5.0 * random_physical_field(well_family.grid, rng)
    with pytest.raises(OutOfNeighborhood):
        decompose(U, well_family)


def test_compose_is_gauge_covariant(well_family, rng):
    c = random_state(well_family, rng, 1e-2)
    shifted = ModulationCoords(theta=c.theta + 0.3, omega=c.omega, z=c.z, f=c.f, omega0=c.omega0)
    np.testing.assert_allclose(compose(shifted, well_family),
                               gauge(compose(c, well_family), 0.3), atol=1e-13)
