import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soliton_lab.grid_model import Grid, make_model, pairing, s1, s3
from soliton_lab.linearization import (assemble, check_H7_to_H10, cubic_form, free_operator,
                                       pc_transfer, quadratic_field)


def rand_field(rng, n):
    return rng.normal(size=(2, n)) + 1j * rng.normal(size=(2, n))


def localized(rng, grid):
    x = grid.nodes
    env = np.exp(-x**2 / 8)
    return rand_field(rng, grid.n) * env


# -- operator identities ----------------------------------------------------------

def test_sigma3_Phi_in_kernel(well_setup):
    s = well_setup
    r = s.Hop(s3(s.gs.Phi))
    assert np.max(np.abs(r)) <= 1e-9 * np.max(np.abs(s.gs.Phi))


def test_frequency_derivative_is_generalized_kernel(well_setup):
    s = well_setup
    r = s.Hop(s.gs.dPhi) + s3(s.gs.Phi)
    assert np.max(np.abs(r)) <= 1e-8


def test_adjoint_is_sigma3_conjugate(well_setup, rng):
    s = well_setup
    g = s.grid
    for _ in range(5):
        X, Y = localized(rng, g), localized(rng, g)
        lhs = pairing(s.Hop(X), Y, g)
        rhs = pairing(X, s.Hop.adjoint()(Y), g)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
        np.testing.assert_allclose(s.Hop.adjoint()(Y), s3(s.Hop(s3(Y))), atol=1e-10)


def test_sigma1_anticommutes_up_to_conjugation(well_setup, rng):
    s = well_setup
    X = localized(rng, s.grid)
    np.testing.assert_allclose(s1(s.Hop(s1(X))), -np.conj(s.Hop(np.conj(X))), atol=1e-10)


def test_matrix_matches_apply(well_setup, rng):
    s = well_setup
    X = localized(rng, s.grid)
    M = s.Hop.matrix()
    np.testing.assert_allclose((M @ X.reshape(-1)).reshape(2, -1), s.Hop(X), atol=1e-9)


def test_free_operator_is_a_multiplier():
    g = Grid("line1d", 256, 40.0)
    H = free_operator(g, 1.2)
    # Dirichlet sine mode on [-L, L]
    k = 7 * np.pi / (2 * g.L)
    e = np.sin(k * (g.nodes + g.L)) + 0j
    X = np.stack([e, np.zeros(g.n)])
    np.testing.assert_allclose(H(X)[0], (k**2 + 1.2) * e, atol=1e-9)
    np.testing.assert_allclose(H(X)[1], 0, atol=1e-12)


# -- discrete spectrum ------------------------------------------------------------

def test_sech_has_no_internal_modes(sech_setup):
    assert sech_setup.spec.m == 0


def test_well_eigenvalue_matches_dense_oracle(well_setup):
    s = well_setup
    ev = np.linalg.eigvals(s.Hop.matrix(sparse=False))
    real = ev[(np.abs(ev.imag) < 1e-6) & (ev.real > 1e-4) & (ev.real < s.omega)].real
    assert s.spec.m == 1 and s.spec.N == 1
    assert len(real) == 1
    assert s.spec.lambdas[0] == pytest.approx(real[0], abs=1e-8)


def test_eigenvector_residual_and_normalization(well_setup):
    s = well_setup
    for lam, xi in zip(s.spec.lambdas, s.spec.xis):
        assert np.max(np.abs(s.Hop(xi) - lam * xi)) <= 1e-8 * np.max(np.abs(xi))
        assert np.max(np.abs(s.Hop(s1(xi)) + lam * s1(xi))) <= 1e-8 * np.max(np.abs(xi))
    np.testing.assert_allclose(s.spec.biorthogonality(), np.eye(s.spec.m), atol=1e-10)


def test_dual_basis_is_biorthogonal(well_setup):
    spec = well_setup.spec
    G = np.array([[pairing(d, b, spec.grid) for b in spec.basis] for d in spec.dual])
    np.testing.assert_allclose(G, np.eye(len(G)), atol=1e-8)


# -- projections --------------------------------------------------------------------

def test_projection_identities(well_setup, rng):
    spec = well_setup.spec
    g = spec.grid
    X = localized(rng, g)
    PcX = spec.Pc(X)
    np.testing.assert_allclose(spec.Pc(PcX), PcX, atol=1e-10)
    for d in spec.dual:
        assert abs(pairing(d, PcX, g)) <= 1e-10
    np.testing.assert_allclose(spec.Pc(well_setup.Hop(X)), well_setup.Hop(PcX), atol=1e-7)
    Y = localized(rng, g)
    assert abs(pairing(spec.Pc(X), Y, g) - pairing(X, spec.Pc_adjoint(Y), g)) <= 1e-10
    np.testing.assert_allclose(spec.Pc_adjoint(Y), s3(spec.Pc(s3(Y))), atol=1e-10)


def test_pc_transfer_lands_in_reference_range(well_family, rng):
    p0 = well_family.reference
    pt = well_family.at(well_family.omega0 + 0.03)
    X = localized(rng, p0.grid)
    f = pc_transfer(pt, p0, X)
    np.testing.assert_allclose(p0.Pc(f), f, atol=1e-10)
    np.testing.assert_allclose(pt.Pc(f), pt.Pc(X), atol=1e-10)


# -- arithmetic conditions -----------------------------------------------------------

def test_h7_to_h10_for_generic_eigenvalue():
    rep = check_H7_to_H10([0.83507], 1.5)
    assert rep.h7 and rep.h8 and rep.h9 and rep.h10
    assert list(rep.N_js) == [1]


def test_h9_reports_witness_for_resonant_pair():
    rep = check_H7_to_H10([0.4, 0.8], 1.5)
    assert not rep.h9
    mu = np.array(rep.h9_witness)
    assert np.any(mu) and abs(mu @ [0.4, 0.8]) < 1e-12


def test_h8_detects_threshold_combination():
    rep = check_H7_to_H10([0.5, 1.1], 1.6)
    assert not rep.h8 and rep.h8_witness is not None
    assert abs(np.dot(rep.h8_witness, [0.5, 1.1]) - 1.6) < 1e-12


def test_h7_fails_for_integer_ratio_and_empty_spectrum():
    assert not check_H7_to_H10([0.5], 1.5).h7
    assert not check_H7_to_H10([], 1.5).h7


# -- cubic Taylor term -------------------------------------------------------------------

def _nonlinear_energy(model, grid, phi, R):
    s = (phi + R[0]) * (phi + R[1])
    return np.sum(grid.weights * model.nonlinearity.B(s))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cubic_form_is_third_taylor_coefficient(seed):
    rng = np.random.default_rng(seed)
    g = Grid("line1d", 128, 20.0)
    m = make_model(g, kappa=1.0, q=1.0)
    phi = np.sqrt(2) / np.cosh(g.nodes)
    R = rng.normal(size=(2, g.n)) * np.exp(-g.nodes**2 / 4)
    h = 1e-2
    # fourth-order central stencil for f'''(0) of f(t) = E_nl(phi + t R)
    f = {k: _nonlinear_energy(m, g, phi, k * h * R) for k in (-3, -2, -1, 1, 2, 3)}
    d3 = (-f[3] + 8 * f[2] - 13 * f[1] + 13 * f[-1] - 8 * f[-2] + f[-3]) / (8 * h**3)
    T = cubic_form(R, R, R, phi, m, g)
    assert abs(T.imag) < 1e-14
    assert abs(6 * T.real - d3) <= 1e-5 * max(1.0, abs(d3))


def test_quadratic_field_is_symmetric_and_matches_form(rng):
    g = Grid("line1d", 128, 20.0)
    m = make_model(g, kappa=2.0, q=1.0)
    phi = np.sqrt(2) / np.cosh(g.nodes)
    X, Y, Z = (rand_field(rng, g.n) for _ in range(3))
    np.testing.assert_allclose(quadratic_field(X, Y, phi, m), quadratic_field(Y, X, phi, m), atol=1e-12)
    # <sigma1 sigma3 Q(X, Y), Z> = 3 T(X, Y, Z)
    lhs = pairing(s1(s3(quadratic_field(X, Y, phi, m))), Z, g)
    assert abs(lhs - 3 * cubic_form(X, Y, Z, phi, m, g)) <= 1e-10 * max(1.0, abs(lhs))
