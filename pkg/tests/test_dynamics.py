import numpy as np
import pytest

from soliton_lab.dynamics import (ResonantProfiles, SimConfig, SimRecord, evolve, extract_scattering,
                                  fit_decay, g_variable, initial_state, strichartz_exponent,
                                  trend_is_monotone_convergent)
from soliton_lab.fgr import leading_order_inputs
from soliton_lab.grid_model import Grid, gauge, make_model, weighted_norm
from soliton_lab.linearization import SpectralFamily


def physical(u):
    return np.stack([u, np.conj(u)])


@pytest.fixture(scope="module")
def sech_family():
    g = Grid("line1d", 512, 40.0)
    m = make_model(g)
    return g, m, SpectralFamily(m, 1.0)


@pytest.fixture(scope="module")
def stationary_run(sech_family):
    g, m, fam = sech_family
    cfg = SimConfig(T=50.0, dt=0.01, record_every=50)
    U0 = initial_state(fam, cfg)
    return U0, evolve(U0, m, g, cfg, fam)


# -- conservation and exact solutions ----------------------------------------------------

def test_stationary_soliton_stays_put(stationary_run):
    U0, rec = stationary_run
    assert rec.status == "ok"
    # the splitting dresses the profile at O(dt^2)
    assert np.max(np.abs(np.abs(rec.final_field[0]) - np.abs(U0[0]))) < 1e-3
    assert np.max(np.abs(np.array(rec.mass) - rec.initial_mass)) < 1e-10 * rec.initial_mass
    assert np.max(np.abs(np.array(rec.omega) - 1.0)) < 1e-6
    e = np.array(rec.energy)
    assert np.max(np.abs(e - e[0])) < 1e-6 * abs(e[0])


def test_stationary_profile_error_is_second_order(sech_family):
    g, m, fam = sech_family
    errs = []
    for dt in (0.02, 0.01):
        cfg = SimConfig(T=10.0, dt=dt, record_every=10**6, decompose_records=False)
        U0 = initial_state(fam, cfg)
        errs.append(np.max(np.abs(np.abs(evolve(U0, m, g, cfg).final_field[0]) - np.abs(U0[0]))))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_stationary_soliton_phase_advances_at_omega(stationary_run):
    _, rec = stationary_run
    th = np.unwrap(rec.theta)
    t = np.array(rec.times)
    slope = np.polyfit(t, th, 1)[0]
    # the discrete soliton rotates at omega + O(dt^2)
    assert abs(abs(slope) - 1.0) < 1e-3


def test_free_gaussian_disperses_exactly():
    g = Grid("line1d", 1024, 40.0)
    m = make_model(g, kappa=0.0)
    x = g.nodes
    cfg = SimConfig(T=3.0, dt=0.01, record_every=100, decompose_records=False)
    rec = evolve(physical(np.exp(-x**2 / 2) + 0j), m, g, cfg)
    t = cfg.T
    dens = np.exp(-x**2 / (1 + 4 * t**2)) / np.sqrt(1 + 4 * t**2)
    assert np.max(np.abs(np.abs(rec.final_field[0]) ** 2 - dens)) < 1e-10
    assert np.max(np.abs(np.array(rec.mass) - rec.initial_mass)) < 1e-12
    e = np.array(rec.energy)
    assert np.max(np.abs(e - e[0])) < 1e-10


def test_absorbed_mass_closes_the_balance():
    g = Grid("line1d", 512, 20.0)
    m = make_model(g, kappa=0.0)
    x = g.nodes
    cfg = SimConfig(T=10.0, dt=0.01, record_every=100, decompose_records=False,
                    absorber_strength=1.0)
    rec = evolve(physical(np.exp(-x**2 / 2 + 2j * x)), m, g, cfg)
    total = np.array(rec.mass) + np.array(rec.absorbed)
    assert rec.absorbed[-1] > 0.5 * rec.initial_mass
    assert np.max(np.abs(total - rec.initial_mass)) < 1e-10


# -- numerics ------------------------------------------------------------------------------------

def _final(U0, model, grid, dt, T=1.0, scheme="strang_split"):
    cfg = SimConfig(T=T, dt=dt, scheme=scheme, record_every=10**6, decompose_records=False)
    return evolve(U0, model, grid, cfg).final_field[0]


def test_strang_splitting_is_second_order(well_setup):
    s = well_setup
    x = s.grid.nodes
    U0 = physical(s.gs.phi * (1 + 0.1 * np.exp(-x**2)) + 0j)
    ref = _final(U0, s.model, s.grid, 0.00125)
    e1 = np.max(np.abs(_final(U0, s.model, s.grid, 0.02) - ref))
    e2 = np.max(np.abs(_final(U0, s.model, s.grid, 0.01) - ref))
    assert 3.0 < e1 / e2 < 5.0


def test_rk4_agrees_with_splitting():
    g = Grid("line1d", 128, 10.0, 4)
    m = make_model(g)
    U0 = physical(np.sqrt(2) / np.cosh(g.nodes) * (1 + 0.05j) + 0j)
    a = _final(U0, m, g, 5e-4, T=0.5, scheme="rk4_full")
    b = _final(U0, m, g, 5e-4, T=0.5)
    assert np.max(np.abs(a - b)) < 1e-5


def test_evolution_is_gauge_covariant(well_setup):
    s = well_setup
    x = s.grid.nodes
    U0 = physical(s.gs.phi * (1 + 0.2 * np.exp(-x**2) * (1 + 1j)))
    a = _final(gauge(U0, 0.9), s.model, s.grid, 0.01)
    b = np.exp(0.9j) * _final(U0, s.model, s.grid, 0.01)
    assert np.max(np.abs(a - b)) < 1e-12


def test_config_validation():
    g = Grid("line1d", 128, 10.0)
    with pytest.raises(ValueError):
        SimConfig(T=1.0, dt=0.01, scheme="leapfrog").validate(g)
    with pytest.raises(ValueError):
        SimConfig(T=1.0, dt=1.0, scheme="rk4_full").validate(g)
    with pytest.raises(ValueError):
        SimConfig(T=1.0, dt=0.01).validate(Grid("radial3d", 64, 10.0))
    with pytest.raises(ValueError):
        evolve(np.ones((2, g.n)) * np.array([[1.0], [2.0]]), make_model(g), g, SimConfig(T=1.0, dt=0.01))


def test_strichartz_exponent():
    assert strichartz_exponent(Grid("line1d", 16, 1.0)) == pytest.approx(6.0)
    assert strichartz_exponent(Grid("radial3d", 16, 1.0)) == pytest.approx(2.0)


# -- internal mode ---------------------------------------------------------------------------------

def test_internal_mode_oscillates_at_its_eigenvalue(well_setup, well_family):
    s = well_setup
    lam = s.spec.lambdas[0]
    cfg = SimConfig(T=20.0, dt=0.005, record_every=20, z0=np.array([1e-3]))
    rec = evolve(initial_state(well_family, cfg), s.model, s.grid, cfg, well_family)
    assert rec.status == "ok"
    z = np.array(rec.z)[:, 0]
    freq = -np.polyfit(rec.times, np.unwrap(np.angle(z)), 1)[0]
    assert freq == pytest.approx(lam, rel=1e-3)
    assert np.max(np.abs(np.abs(z) - 1e-3)) < 1e-4


# -- fits and extraction -----------------------------------------------------------------------------

def test_fit_decay_recovers_exact_law():
    t = np.linspace(0, 2000, 401)
    z = (0.05**-2 + 8.5 * t) ** -0.5
    fit = fit_decay(t, z, N=1, window=(200, 2000))
    assert fit.status == "ok"
    assert fit.Gamma_fit == pytest.approx(8.5, rel=1e-10)
    assert fit.r2_linear == pytest.approx(1.0, abs=1e-12)
    assert -0.5 < fit.exponent_fit < -0.4


def test_fit_decay_tolerates_noise():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 2000, 401)
    z = (0.05**-2 + 8.5 * t) ** -0.5 * (1 + 0.01 * rng.normal(size=t.size))
    fit = fit_decay(t, z, N=1, window=(200, 2000))
    assert fit.Gamma_fit == pytest.approx(8.5, rel=0.05)
    assert fit.r2 > 0.99


def test_fit_decay_reports_no_decay():
    t = np.linspace(0, 100, 50)
    assert fit_decay(t, np.full(t.size, 0.05)).status == "no-decay"
    assert fit_decay(t[:3], np.full(3, 0.05)).status == "no-decay"


def test_scattering_of_stationary_soliton(stationary_run, sech_family):
    _, rec = stationary_run
    res = extract_scattering(rec, sech_family[2], period=2 * np.pi)
    assert res.omega_plus == pytest.approx(1.0, abs=1e-6)
    assert res.radiated_mass < 1e-6
    assert res.relation_residual < 1e-6


def test_trend_detector():
    t = np.linspace(0, 400, 4001)
    conv = 1.5 + 0.01 * (1 - np.exp(-t / 100)) + 1e-3 * np.sin(2 * np.pi * t / 7.5)
    assert trend_is_monotone_convergent(t, conv, 7.5)
    wander = 1.5 + 0.01 * np.sin(2 * np.pi * t / 150)
    assert not trend_is_monotone_convergent(t, wander, 7.5)


# -- radiation with the resonant part removed ------------------------------------------------------

@pytest.fixture(scope="module")
def profiles(well_setup):
    s = well_setup
    inputs = leading_order_inputs(s.spec, s.model)
    return inputs, ResonantProfiles(s.Hop, inputs)


def test_g_equals_f_when_z_vanishes(well_setup, profiles):
    s = well_setup
    inputs, prof = profiles
    rng = np.random.default_rng(1)
    x = s.grid.nodes
    rec = SimRecord()
    for k in range(4):
        v = rng.normal(size=s.grid.n) * np.exp(-x**2 / 10)
        rec.times.append(float(k))
        rec.z.append(np.zeros(1, complex))
        rec.f_fields.append(s.spec.Pc(physical(v + 0j)))
    series = g_variable(rec, s.spec, inputs, profiles=prof)
    np.testing.assert_allclose(series.g_local, series.f_local, rtol=1e-14)


def test_g_vanishes_on_slaved_radiation(well_setup, profiles):
    s = well_setup
    inputs, prof = profiles
    rec = SimRecord()
    for k, z in enumerate([1e-2, 2e-2 * np.exp(0.4j), 5e-3j]):
        zz = np.array([z])
        rec.times.append(float(k))
        rec.z.append(zz)
        rec.f_fields.append(-prof.polynomial_part(zz))
    series = g_variable(rec, s.spec, inputs, profiles=prof)
    assert np.max(series.g_local) < 1e-14
    assert np.min(series.f_local) > 0
    gi, fi = series.integrals()
    assert gi < 1e-20 < fi


def test_g_variable_needs_fields(well_setup, profiles):
    inputs, prof = profiles
    with pytest.raises(ValueError):
        g_variable(SimRecord(), well_setup.spec, inputs, profiles=prof)
