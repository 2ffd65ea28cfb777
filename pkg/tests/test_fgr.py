import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soliton_lab.grid_model import Grid, pairing, s3
from soliton_lab.linearization import free_operator
from soliton_lab.fgr import (FgrInputs, ResonantLevel, ShiftedSolver, check_H11, decay_rate,
                             direct_decay_rate, free_kernel_form, gamma_coefficient, gamma_from_forms,
                             leading_order_inputs, level_form, level_forms, outgoing_operator,
                             resolvent_quadratic_form, resonant_multi_indices, richardson)


def free_gaussian_oracle(k):
    """Im <(-d^2 - k^2 - i0)^{-1} G, conj G> for G = exp(-x^2/4) (1 + 0.3 i x).

    The transform of G at +-k is 2 sqrt(pi) exp(-k^2) (1 -+ 0.6 k), and the
    outgoing kernel contributes the average of both squared moduli over 2k.
    """
    return np.pi * np.exp(-2 * k**2) * ((1 - 0.6 * k) ** 2 + (1 + 0.6 * k) ** 2) / k


@pytest.fixture(scope="module")
def free_case():
    g = Grid("line1d", 1024, 100.0)
    x = g.nodes
    G = np.stack([np.exp(-x**2 / 4) * (1 + 0.3j * x), np.zeros(g.n)])
    return g, free_operator(g, 1.0), G


@pytest.fixture(scope="module")
def scenario(fgr_setup):
    s = fgr_setup
    inputs = leading_order_inputs(s.spec, s.model)
    forms = level_forms(s.Hop, inputs)
    return s, inputs, forms


# -- free-space oracle -----------------------------------------------------------------

def test_free_resolvent_matches_closed_form(free_case):
    g, H, G = free_case
    r = 1.6
    k = np.sqrt(r - 1.0)
    lf = level_form(H, ResonantLevel(r, [(2,)], G[None]))
    assert lf.converged
    assert lf.matrix[0, 0].imag == pytest.approx(free_gaussian_oracle(k), rel=1e-2)


def test_free_kernel_quadrature_matches_closed_form(free_case):
    g, _, G = free_case
    for k in (0.5, 0.8, 1.3):
        assert free_kernel_form(G[0], g, k) == pytest.approx(free_gaussian_oracle(k), rel=1e-10)


# -- positivity and structure -------------------------------------------------------------

def test_gamma_nonnegative_over_random_directions(scenario):
    _, _, forms = scenario
    rng = np.random.default_rng(7)
    for _ in range(100):
        zeta = rng.normal(size=1) + 1j * rng.normal(size=1)
        assert gamma_from_forms(forms, zeta).Gamma >= 0


def test_resolvent_form_is_positive_on_random_continuum_fields(fgr_setup):
    s = fgr_setup
    rng = np.random.default_rng(11)
    x = s.grid.nodes
    fields = np.array([s.spec.Pc((rng.normal(size=(2, s.grid.n)) + 1j * rng.normal(size=(2, s.grid.n)))
                                 * np.exp(-x**2 / 8)) for _ in range(12)])
    lf = level_form(s.Hop, ResonantLevel(2 * s.spec.lambdas[0], [(2,)] * 12, fields))
    K = (lf.matrix - lf.matrix.conj().T) / 2j
    ev = np.linalg.eigvalsh(K)
    assert ev.min() >= -1e-6 * ev.max()


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-np.pi, np.pi))
def test_gamma_is_homogeneous_of_degree_four(c, phase):
    g = Grid("line1d", 32, 5.0)
    G = np.ones((1, 2, g.n), complex)
    lv = ResonantLevel(1.0, [(2,)], G)
    zeta = np.array([0.3 + 0.4j])
    np.testing.assert_allclose(lv.combine(c * np.exp(1j * phase) * zeta),
                               (c * np.exp(1j * phase)) ** 2 * lv.combine(zeta), rtol=1e-12)


def test_gamma_scaling_and_zero(scenario):
    _, _, forms = scenario
    zeta = np.array([0.6 - 0.2j])
    base = gamma_from_forms(forms, zeta).Gamma
    assert gamma_from_forms(forms, 3.0 * zeta).Gamma == pytest.approx(81.0 * base, rel=1e-12)
    assert gamma_from_forms(forms, np.zeros(1)).Gamma == 0.0


def test_resolvent_adjoint_identity(well_setup, rng):
    s = well_setup
    g = s.grid
    x = g.nodes
    op = outgoing_operator(s.Hop, 1.8)
    z = 1.8 + 0.05j
    A = (rng.normal(size=(2, g.n)) + 1j * rng.normal(size=(2, g.n))) * np.exp(-x**2 / 8)
    B = (rng.normal(size=(2, g.n)) + 1j * rng.normal(size=(2, g.n))) * np.exp(-x**2 / 8)
    lhs = pairing(ShiftedSolver(op, z).solve(A), B, g)
    rhs = pairing(A, ShiftedSolver(op.adjoint(), z).solve(B), g)
    assert abs(lhs - rhs) <= 1e-9 * abs(lhs)
    np.testing.assert_allclose(op.adjoint()(B), s3(op(s3(B))), atol=1e-10)


def test_eigenvector_input_has_no_absorption(well_setup):
    s = well_setup
    xi = s.spec.xis[0].astype(complex)
    lam = s.spec.lambdas[0]
    r = 1.7
    vals = [resolvent_quadratic_form(s.Hop, r, e, xi, absorber=None) for e in (0.004, 0.002, 0.001)]
    val, _ = richardson(vals)
    assert vals[0] == pytest.approx(1.0 / (lam - r - 0.004j), rel=1e-7)
    assert abs(val.imag) < 1e-6


def test_input_outside_continuous_subspace_is_rejected(well_setup):
    s = well_setup
    xi = s.spec.xis[0].astype(complex)
    inputs = FgrInputs(1.5, s.spec.lambdas, [ResonantLevel(1.7, [(2,)], xi[None])])
    with pytest.raises(ValueError):
        gamma_coefficient(s.Hop, s.spec, inputs, [1.0])


# -- decay constant and (H11) ---------------------------------------------------------------

def test_scenario_decay_constant_two_routes(scenario):
    s, inputs, forms = scenario
    res = gamma_from_forms(forms, [1.0])
    assert res.converged and res.Gamma > 0
    via_gamma = decay_rate(res, s.spec.lambdas)
    direct, _ = direct_decay_rate(s.Hop, s.spec, s.model)
    assert via_gamma == pytest.approx(direct, rel=1e-8)


def test_h11_single_level_has_constant_ratio(scenario):
    s, inputs, forms = scenario
    rep = check_H11(s.Hop, s.spec, inputs, forms=forms)
    assert rep.n_samples >= 200
    assert rep.verdict
    assert rep.max_ratio == pytest.approx(rep.min_ratio, rel=1e-10)


def test_h11_fails_without_inputs():
    assert not check_H11(None, None, FgrInputs(1.5, np.zeros(0))).verdict
    zero = [ResonantLevel(1.6, [(2, 0)], np.zeros((1, 2, 8), complex)),
            ResonantLevel(1.8, [(0, 2)], np.zeros((1, 2, 8), complex))]
    rep = check_H11(None, None, FgrInputs(1.5, np.array([0.8, 0.9]), zero))
    assert not rep.verdict


def test_h11_exposes_degenerate_level(free_case):
    g, H, G = free_case
    levels = [ResonantLevel(1.6, [(2, 0)], G[None]),
              ResonantLevel(1.8, [(0, 2)], np.zeros((1, 2, g.n), complex))]
    rep = check_H11(H, None, FgrInputs(1.0, np.array([0.8, 0.9]), levels))
    assert abs(rep.min_form_eigenvalue) < 1e-12
    assert rep.min_ratio < rep.max_ratio


# -- helpers ------------------------------------------------------------------------------

def test_richardson_is_exact_on_quadratics():
    f = lambda e: 2.0 - 3.0 * e + 5.0 * e**2
    val, err = richardson([f(0.1), f(0.05), f(0.025)])
    assert val == pytest.approx(2.0, abs=1e-13)
    assert err > 0


def test_resonant_multi_indices():
    (r, alphas), = resonant_multi_indices([0.83507], 1.5).items()
    assert r == pytest.approx(1.67014) and alphas == [(2,)]
    assert list(resonant_multi_indices([0.4], 1.5).values()) == [[(4,)]]
    groups = resonant_multi_indices([0.6, 0.9], 1.5)
    assert len(groups) == 1
    (r, alphas), = groups.items()
    assert r == pytest.approx(1.8)
    assert sorted(alphas) == [(0, 2), (3, 0)]
    assert resonant_multi_indices([], 1.5) == {}
