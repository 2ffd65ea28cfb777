import numpy as np
import pytest

from soliton_lab.grid_model import Grid, default_grid, make_model, pairing, s3
from soliton_lab.ground_state import (NewtonDivergence, NotAGroundState, check_H5_H6,
                                      continue_family, l_minus, lplus_spectrum, solve_ground_state)

# q(1) for the radial cubic profile -u'' - (2/r) u' + u - u^3 = 0, from an
# independent shooting computation (bisection on u(0) with DOP853 at
# rtol 1e-12, mass integrated on a 4e5-point trapezoid grid).
RADIAL_Q1_SHOOTING = 18.897251


@pytest.fixture(scope="module")
def line():
    g = default_grid("line1d")
    return g, make_model(g)


@pytest.fixture(scope="module")
def coarse_line():
    g = Grid("line1d", 1024, 40.0)
    return g, make_model(g)


@pytest.fixture(scope="module")
def line_family(coarse_line):
    g, m = coarse_line
    return continue_family(m, g, (0.5, 2.0), 12)


@pytest.fixture(scope="module")
def radial():
    g = default_grid("radial3d")
    return g, make_model(g)


def test_sech_profile(line):
    g, m = line
    gs = solve_ground_state(m, g, 1.0)
    assert np.max(np.abs(gs.phi - np.sqrt(2) / np.cosh(g.nodes))) <= 1e-8
    assert np.min(gs.phi) > 0
    assert gs.residual <= 1e-10 * np.max(gs.phi)


def test_sech_mass_at_omega_4(line):
    g, m = line
    assert solve_ground_state(m, g, 4.0).q == pytest.approx(8.0, rel=1e-6)


def test_frequency_derivative_matches_closed_form(line):
    g, m = line
    x = g.nodes
    gs = solve_ground_state(m, g, 1.0)
    exact = np.sqrt(2) / (2 * np.cosh(x)) - np.sqrt(2) * np.tanh(x) * x / (2 * np.cosh(x))
    assert np.max(np.abs(gs.dphi - exact)) < 1e-8


def test_radial_ground_state_matches_shooting(radial):
    g, m = radial
    gs = solve_ground_state(m, g, 1.0)
    assert np.min(gs.phi) > 0
    assert gs.q == pytest.approx(RADIAL_Q1_SHOOTING, rel=1e-3)


def test_line_family_mass(line_family):
    fam = line_family
    assert not fam.truncated
    np.testing.assert_allclose(fam.q, 4 * np.sqrt(fam.omegas), rtol=1e-5)
    assert np.all(fam.qprime > 0)


def test_family_is_smooth(line_family):
    d2 = np.abs(np.diff(line_family.q, 2))
    assert np.max(d2) < 10 * np.median(d2)


def test_radial_cubic_family_is_unstable_branch(radial):
    g, m = radial
    fam = continue_family(m, g, (0.5, 2.0), 8)
    assert np.all(fam.qprime < 0)
    q1 = solve_ground_state(m, g, 1.0).q
    np.testing.assert_allclose(fam.q, q1 / np.sqrt(fam.omegas), rtol=1e-3)


def test_radial_fractional_power_family_is_stable_branch(radial):
    g, _ = radial
    m = make_model(g, q=0.5)
    fam = continue_family(m, g, (0.5, 2.0), 6)
    assert np.all(fam.qprime > 0)
    report = check_H5_H6(fam, m, g)
    assert report.h5


def test_d_prime_equals_q(line):
    g, m = line
    w, h = 1.2, 1e-3
    d = [solve_ground_state(m, g, w + s * h, derivative="none").d for s in (-1, 1)]
    q = solve_ground_state(m, g, w, derivative="none").q
    assert abs((d[1] - d[0]) / (2 * h) - q) <= 1e-5 * q


def test_lplus_has_one_negative_eigenvalue(line):
    g, m = line
    gs = solve_ground_state(m, g, 1.0)
    vals, smallest, _ = lplus_spectrum(gs, m, k=2)
    # L+ = -d^2 + 1 - 6 sech^2 has the eigenvalue -3 exactly; the next even one is positive
    assert vals[0] == pytest.approx(-3.0, abs=1e-6)
    assert vals[1] > 0
    assert smallest > 1e-6


def test_lminus_annihilates_phi(line):
    g, m = line
    gs = solve_ground_state(m, g, 1.0)
    assert np.max(np.abs(l_minus(gs.phi, m, 1.0) @ gs.phi)) <= 1e-8


def test_h5_h6_for_cubic_line(coarse_line, line_family):
    g, m = coarse_line
    rep = check_H5_H6(line_family, m, g)
    assert rep.h5 and rep.h6_all
    assert max(rep.lminus_phi_residual) < 1e-8


def test_sigma3_phi_orthogonal_to_frequency_derivative(line):
    g, m = line
    gs = solve_ground_state(m, g, 1.3)
    assert abs(pairing(s3(gs.Phi), gs.dPhi, g)) <= 1e-10


def test_newton_converges_quadratically(line):
    g, m = line
    guess = 1.05 * np.sqrt(2) / np.cosh(g.nodes)
    h = solve_ground_state(m, g, 1.0, guess).residual_history
    assert len(h) >= 4
    # inside the basin and above roundoff, r_{k+1} <= C r_k^2
    steps = [(a, b) for a, b in zip(h, h[1:]) if a < 1e-2 and b > 1e-11]
    assert steps
    for a, b in steps:
        assert b <= 10 * a**2


def test_sign_changing_solution_is_rejected():
    g = Grid("line1d", 512, 30.0)
    m = make_model(g, potential={"type": "gaussian_well", "depth": 3.0, "width": 2.0})
    x = g.nodes
    with pytest.raises(NotAGroundState):
        solve_ground_state(m, g, 1.0, x * np.exp(-x**2 / 4), parity="full")


def test_newton_failure_reports_residual(line):
    g, m = line
    with pytest.raises(NewtonDivergence) as info:
        solve_ground_state(m, g, 1.0, np.exp(-g.nodes**2), max_iter=1)
    assert info.value.residual > 0


def test_invalid_frequency(line):
    g, m = line
    with pytest.raises(ValueError):
        solve_ground_state(m, g, -1.0)
