"""Time integration of the NLS and extraction of modulation diagnostics.

The evolved equation is i u_t = -Delta u + V u + beta(|u|^2) u - i W u, where
W >= 0 is an optional absorbing ramp near the boundary.  On line grids the
default scheme is Strang splitting with both sub-flows solved exactly:

* kinetic part in the sine basis, u_k -> exp(-i k^2 t) u_k;
* local part pointwise: |u|^2 decays like exp(-2 W t) and the phase is the
  time integral of V + beta(|u|^2), in closed form for power nonlinearities.

Radial grids use classical RK4 on the banded operator.  Mass removed by the
absorber is accumulated exactly so that Q(t) + absorbed(t) is conserved.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.integrate import trapezoid

from .grid_model import (Grid, Model, PowerNonlinearity, absorber_profile, energy, l2_norm,
                         mass, weighted_norm)
from .linearization import SpectralFamily
from .modulation import ModulationCoords, OutOfNeighborhood, compose, decompose

logger = logging.getLogger(__name__)

RK4_STABILITY = 2.5


@dataclass
class SimConfig:
    T: float
    dt: float
    scheme: str = "strang_split"
    record_every: int = 100
    z0: Optional[np.ndarray] = None
    theta0: float = 0.0
    omega0: Optional[float] = None
    absorber_strength: float = 0.0
    absorber_fraction: float = 0.2
    decompose_records: bool = True
    store_f: bool = False

    def validate(self, grid: Grid):
        if self.scheme not in ("strang_split", "rk4_full"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "strang_split" and grid.kind != "line1d":
            raise ValueError("strang_split is implemented for line1d grids; use rk4_full")
        if self.dt <= 0 or self.T <= 0 or self.record_every < 1:
            raise ValueError("T, dt and record_every must be positive")
        if self.scheme == "rk4_full":
            lam = np.max(np.abs(np.linalg.eigvalsh(_dense(grid.laplacian_matrix)))) \
                if grid.n <= 4096 else 4.0 / grid.h**2
            if self.dt * lam > RK4_STABILITY:
                raise ValueError(f"dt*|Delta| = {self.dt * lam:.3g} exceeds the RK4 bound {RK4_STABILITY}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


def _dense(A):
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
    return 0.5 * (A + A.T) if A.shape[0] == A.shape[1] else A


@dataclass
class SimRecord:
    times: List[float] = field(default_factory=list)
    mass: List[float] = field(default_factory=list)
    absorbed: List[float] = field(default_factory=list)
    energy: List[float] = field(default_factory=list)
    theta: List[float] = field(default_factory=list)
    omega: List[float] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    local_decay: List[float] = field(default_factory=list)
    f_norm: List[float] = field(default_factory=list)
    l6_norm: List[float] = field(default_factory=list)
    strichartz_running: List[float] = field(default_factory=list)
    f_fields: List[np.ndarray] = field(default_factory=list)
    status: str = "ok"
    initial_mass: float = 0.0
    final_field: Optional[np.ndarray] = None
    final_f: Optional[np.ndarray] = None
    wall_time: float = 0.0

    def arrays(self) -> dict:
        out = {k: np.asarray(getattr(self, k)) for k in
               ("times", "mass", "absorbed", "energy", "theta", "omega", "local_decay", "f_norm",
                "l6_norm", "strichartz_running")}
        out["z"] = np.array(self.z) if self.z else np.zeros((0, 0))
        return out

    @property
    def zabs(self) -> np.ndarray:
        Z = np.array(self.z)
        return np.abs(Z[:, 0]) if Z.ndim == 2 and Z.shape[1] else np.zeros(len(self.times))


# ---------------------------------------------------------------------------
# Sub-flows
# ---------------------------------------------------------------------------

class _LocalFlow:
    """Exact flow of i u_t = (V + beta(|u|^2)) u - i W u over a time tau."""

    def __init__(self, model: Model, W: np.ndarray):
        self.V = model.potential
        self.W = W
        self.nl = model.nonlinearity
        self.power = isinstance(self.nl, PowerNonlinearity)
        self._gl = np.polynomial.legendre.leggauss(6)

    def __call__(self, u: np.ndarray, tau: float):
        s0 = np.abs(u) ** 2
        W = self.W
        decay = np.exp(-W * tau)
        if self.power:
            kappa, q = self.nl.kappa, self.nl.q
            # int_0^tau -kappa (s0 e^{-2 W t})^q dt
            a = 2.0 * q * W * tau
            with np.errstate(invalid="ignore", divide="ignore"):
                fac = np.where(a > 1e-8, -np.expm1(-a) / np.where(a > 1e-8, a, 1.0),
                               1.0 - a / 2.0 + a * a / 6.0)
            phase = self.V * tau - kappa * s0**q * tau * fac
        else:
            x, w = self._gl
            t = 0.5 * tau * (x + 1.0)
            phase = self.V * tau
            for tk, wk in zip(t, w):
                phase = phase + 0.5 * tau * wk * self.nl.beta(s0 * np.exp(-2.0 * W * tk))
        u_new = u * decay * np.exp(-1j * phase)
        return u_new


class _KineticFlow:
    """Exact flow of i u_t = -Delta u for the grid's discrete Laplacian.

    The spectral and second-order stencils are diagonal in the sine basis.
    Wider stencils have one-sided boundary closures that break this, so their
    flow goes through an eigendecomposition of the symmetrized matrix.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        self.Q = None
        if grid.is_spectral:
            self.symbol = grid.wavenumbers**2
        else:
            eye = np.eye(grid.n)
            cols = grid.laplacian_matrix @ grid.inverse_sine_transform(eye)
            M = grid.sine_transform(np.asarray(cols).T).T
            diag = np.real(np.diag(M))
            off = np.max(np.abs(M - np.diag(diag)))
            if off <= 1e-10 * np.max(np.abs(diag)):
                self.symbol = -diag
            else:
                sq = grid.symmetrizer()
                A = _dense(grid.laplacian_matrix)
                A = sq[:, None] * A / sq[None, :]
                evals, self.Q = np.linalg.eigh(0.5 * (A + A.T))
                self.symbol = -evals
                self._sq = sq
        self._cache = {}

    def __call__(self, u: np.ndarray, tau: float) -> np.ndarray:
        prop = self._cache.get(tau)
        if prop is None:
            prop = np.exp(-1j * self.symbol * tau)
            self._cache[tau] = prop
        if self.Q is not None:
            c = self.Q.T @ (self._sq * u)
            return (self.Q @ (prop * c)) / self._sq
        c = self.grid.sine_transform(u.real) + 1j * self.grid.sine_transform(u.imag)
        c = c * prop
        return self.grid.inverse_sine_transform(c.real) + 1j * self.grid.inverse_sine_transform(c.imag)


def _rk4_rhs(u, model, W):
    lap = model.grid.laplacian
    s = np.abs(u) ** 2
    return -1j * (-(lap(u.real) + 1j * lap(u.imag)) + model.potential * u + model.beta(s) * u) - W * u


def _lp_norm(u: np.ndarray, grid: Grid, p: float) -> float:
    return float(np.sum(grid.weights * np.abs(u) ** p) ** (1.0 / p))


def strichartz_exponent(grid: Grid, p: float = 6.0) -> float:
    """Time exponent r of the admissible pair (r, p): 2/r + d/p = d/2."""
    d = grid.dim
    return 2.0 / (d / 2.0 - d / p)


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------

def initial_state(family: SpectralFamily, cfg: SimConfig) -> np.ndarray:
    """U0 composed from (theta0, omega0, z0, f=0)."""
    m = family.m
    z0 = np.zeros(m, dtype=complex) if cfg.z0 is None else np.asarray(cfg.z0, dtype=complex)
    om = family.omega0 if cfg.omega0 is None else cfg.omega0
    coords = ModulationCoords(theta=cfg.theta0, omega=om, z=z0,
                              f=np.zeros((2, family.grid.n), dtype=complex), omega0=family.omega0)
    return compose(coords, family)


def evolve(U0: np.ndarray, model: Model, grid: Grid, cfg: SimConfig,
           family: Optional[SpectralFamily] = None, progress: bool = False) -> SimRecord:
    """Integrate from U0 = (u0, conj u0) and record diagnostics every ``record_every`` steps."""
    import time as _time
    t_wall = _time.perf_counter()
    cfg.validate(grid)
    U0 = np.asarray(U0)
    if U0.ndim == 2:
        if np.max(np.abs(U0[1] - np.conj(U0[0]))) > 1e-10 * (1 + np.max(np.abs(U0[0]))):
            raise ValueError("initial field is not physical (second component != conj of first)")
        u = U0[0].astype(complex).copy()
    else:
        u = U0.astype(complex).copy()
    W = absorber_profile(grid, cfg.absorber_strength, cfg.absorber_fraction) \
        if cfg.absorber_strength > 0 else np.zeros(grid.n)
    rec = SimRecord()
    rec.initial_mass = mass(np.stack([u, np.conj(u)]), grid)
    r_exp = strichartz_exponent(grid)
    absorbed = 0.0
    running = 0.0
    guess = None
    dt = cfg.dt
    n_steps = cfg.n_steps

    def record(t, u, guess, running):
        U = np.stack([u, np.conj(u)])
        rec.times.append(t)
        rec.mass.append(mass(U, grid))
        rec.absorbed.append(absorbed)
        rec.energy.append(energy(U, model, grid, check=False))
        if family is not None and cfg.decompose_records:
            if guess is not None and rec.times[:-1]:
                # the phase advances by about omega per unit time
                guess = guess.copy(theta=guess.theta + guess.omega * (t - rec.times[-2]))
            c = decompose(U, family, guess=guess)
            rec.theta.append(c.theta)
            rec.omega.append(c.omega)
            rec.z.append(c.z.copy())
            rec.local_decay.append(weighted_norm(c.f, grid, 2.0))
            rec.f_norm.append(l2_norm(c.f, grid))
            rec.l6_norm.append(_lp_norm(c.f[0], grid, 6.0))
            rec.strichartz_running.append(running ** (1.0 / r_exp))
            if cfg.store_f:
                rec.f_fields.append(c.f.copy())
            return c
        return None

    try:
        guess = record(0.0, u, None, 0.0)
    except OutOfNeighborhood as exc:
        rec.status = f"left orbital neighborhood: {exc}"
        rec.wall_time = _time.perf_counter() - t_wall
        return rec
    if cfg.scheme == "strang_split":
        local = _LocalFlow(model, W)
        kin = _KineticFlow(grid)
        w2 = np.exp(-2.0 * W * (dt / 2))
        step = 0
        while step < n_steps:
            block = min(cfg.record_every, n_steps - step)
            # half local, then (kinetic, full local) pairs, closing with a half local
            absorbed += float(np.sum(grid.weights * np.abs(u) ** 2 * (1 - w2)))
            u = local(u, dt / 2)
            for k in range(block):
                u = kin(u, dt)
                tau = dt if k < block - 1 else dt / 2
                if cfg.absorber_strength > 0:
                    absorbed += float(np.sum(grid.weights * np.abs(u) ** 2 * (1 - np.exp(-2.0 * W * tau))))
                u = local(u, tau)
            step += block
            if rec.l6_norm:
                running += block * dt * rec.l6_norm[-1] ** r_exp
            try:
                guess = record(step * dt, u, guess, running)
            except OutOfNeighborhood as exc:
                rec.status = f"left orbital neighborhood: {exc}"
                break
            if progress and (step // cfg.record_every) % 100 == 0:
                logger.info("t=%.1f |z|=%s", step * dt, np.abs(rec.z[-1]) if rec.z else "-")
    else:
        step = 0
        while step < n_steps:
            block = min(cfg.record_every, n_steps - step)
            for _ in range(block):
                k1 = _rk4_rhs(u, model, W)
                k2 = _rk4_rhs(u + 0.5 * dt * k1, model, W)
                k3 = _rk4_rhs(u + 0.5 * dt * k2, model, W)
                k4 = _rk4_rhs(u + dt * k3, model, W)
                if cfg.absorber_strength > 0:
                    # absorbed-mass rate 2 int W |u|^2, integrated with the same stages
                    rates = [2 * np.sum(grid.weights * W * np.abs(v) ** 2) for v in
                             (u, u + 0.5 * dt * k1, u + 0.5 * dt * k2, u + dt * k3)]
                    absorbed += dt * (rates[0] + 2 * rates[1] + 2 * rates[2] + rates[3]) / 6
                u = u + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
            step += block
            if rec.l6_norm:
                running += block * dt * rec.l6_norm[-1] ** r_exp
            try:
                guess = record(step * dt, u, guess, running)
            except OutOfNeighborhood as exc:
                rec.status = f"left orbital neighborhood: {exc}"
                break
    rec.final_field = np.stack([u, np.conj(u)])
    if guess is not None:
        rec.final_f = guess.f
    rec.wall_time = _time.perf_counter() - t_wall
    return rec


# ---------------------------------------------------------------------------
# Radiation with the resonant part removed
# ---------------------------------------------------------------------------

@dataclass
class GSeries:
    times: np.ndarray
    g_local: np.ndarray
    f_local: np.ndarray

    def integrals(self):
        """Time integrals of ||g||^2 and ||f||^2 in the weighted norm (trapezoidal)."""
        return (float(trapezoid(self.g_local**2, self.times)),
                float(trapezoid(self.f_local**2, self.times)))


class ResonantProfiles:
    """Outgoing solutions Y_alpha = R+(r) G_alpha for every resonant input, computed once."""

    def __init__(self, Hop, fgr_inputs, eps0=None, absorber="auto", jobs=None):
        from .fgr import level_form
        self.levels = []
        for lv in fgr_inputs.levels:
            lf = level_form(Hop, lv, eps0=eps0, absorber=absorber, jobs=jobs, keep_solutions=True)
            self.levels.append((lv.alphas, lf.solutions))

    def polynomial_part(self, z: np.ndarray) -> np.ndarray:
        """sum_alpha z^alpha Y_alpha plus its sigma1-conjugate (the conj(z)^alpha terms)."""
        from .fgr import monomials
        out = None
        for alphas, Y in self.levels:
            w = monomials(z, alphas)
            part = np.tensordot(w, Y, axes=(0, 0))
            part = part + np.conj(part[::-1])
            out = part if out is None else out + part
        return out


def g_variable(record: SimRecord, spec, fgr_inputs, Hop=None, profiles: Optional[ResonantProfiles] = None,
               s: float = 2.0) -> GSeries:
    """Weighted norms of g = f + sum z^mu zbar^nu R+(lambda.(mu - nu)) G_mu,nu along a record.

    The record must carry the f fields (SimConfig.store_f).  Resolvent solves are
    done once per resonant input and reused for every sample.
    """
    if not record.f_fields:
        raise ValueError("record holds no f fields; run with store_f=True")
    if profiles is None:
        if Hop is None:
            raise ValueError("need Hop or precomputed profiles")
        profiles = ResonantProfiles(Hop, fgr_inputs)
    grid = spec.grid
    g_loc, f_loc = [], []
    for z, f in zip(record.z, record.f_fields):
        poly = profiles.polynomial_part(np.atleast_1d(z))
        g = f if poly is None else f + poly
        g_loc.append(weighted_norm(g, grid, s))
        f_loc.append(weighted_norm(f, grid, s))
    n = len(g_loc)
    return GSeries(np.asarray(record.times[:n]), np.asarray(g_loc), np.asarray(f_loc))


# ---------------------------------------------------------------------------
# Fits and extraction
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    status: str
    Gamma_fit: float
    exponent_fit: float
    r2: float
    r2_linear: float
    window: tuple


def fit_decay(times, zabs, N: int = 1, window=None) -> DecayFit:
    """Fit 1/|z|^{2N} = 1/|z0|^{2N} + N Gamma t and log|z| = a + p log t on a window.

    The default window drops the first 10% of the run.
    """
    t = np.asarray(times, float)
    za = np.asarray(zabs, float)
    if window is None:
        window = (0.1 * t[-1], t[-1])
    sel = (t >= window[0]) & (t <= window[1]) & (za > 0)
    if sel.sum() < 5:
        return DecayFit("no-decay", float("nan"), float("nan"), float("nan"), float("nan"), window)
    ts, zs = t[sel], za[sel]
    if zs[0] < 2.0 * zs[-1] * (1 - 1e-12) and zs.max() < 2.0 * zs.min():
        return DecayFit("no-decay", float("nan"), float("nan"), float("nan"), float("nan"), window)
    y = zs ** (-2 * N)
    A = np.vstack([ts, np.ones_like(ts)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    r2_lin = 1 - np.sum((A @ [slope, icpt] - y) ** 2) / np.sum((y - y.mean()) ** 2)
    lt, lz = np.log(ts), np.log(zs)
    B = np.vstack([lt, np.ones_like(lt)]).T
    (p, c), *_ = np.linalg.lstsq(B, lz, rcond=None)
    r2 = 1 - np.sum((B @ [p, c] - lz) ** 2) / np.sum((lz - lz.mean()) ** 2)
    return DecayFit("ok", float(slope / N), float(p), float(r2), float(r2_lin), tuple(window))


@dataclass
class ScatteringResult:
    omega_plus: float
    f_plus_norm: float
    radiated_mass: float
    relation_residual: float
    relative_residual: float
    trend_monotone: bool


def smoothed_trend(times, values, period: float, n_periods: float = 8.0):
    """Hann-window average spanning ``n_periods`` oscillation periods.

    A single-period boxcar leaves a residual of the internal-mode oscillation
    comparable to the slow drift; the wider tapered window suppresses it.
    """
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    if len(t) < 3:
        return t, v
    dt = t[1] - t[0]
    w = max(1, int(round(n_periods * period / dt)))
    if w >= len(v):
        return t[-1:], np.array([v.mean()])
    ker = np.hanning(w + 2)[1:-1]
    ker /= ker.sum()
    sm = np.convolve(v, ker, mode="valid")
    start = (w - 1) // 2
    return t[start:start + len(sm)] + (0.5 * dt if (w - 1) % 2 else 0.0), sm


def trend_is_monotone_convergent(times, omega, period: float, tail: float = 0.25) -> bool:
    """Smoothed omega over the final ``tail`` of the run is monotone with shrinking increments."""
    ts, sm = smoothed_trend(times, omega, period)
    if len(ts) < 4:
        return False
    sel = ts >= ts[-1] - tail * (times[-1] - times[0])
    seg = sm[sel]
    if len(seg) < 4:
        return False
    # sample at period spacing to compare increments
    idx = np.linspace(0, len(seg) - 1, min(len(seg), 8)).astype(int)
    d = np.diff(seg[idx])
    tol = 1e-12 + 1e-9 * abs(seg).max()
    mono = np.all(d >= -tol) or np.all(d <= tol)
    shrink = abs(d[-1]) <= abs(d[0]) + tol
    return bool(mono and shrink)


def extract_scattering(record: SimRecord, family, period: Optional[float] = None) -> ScatteringResult:
    """omega_+ from the final 10% of the run and the mass relation q(omega+) = q(omega0) - ||f+||^2/2.

    q(omega0) is the initial mass.  With an absorber the radiated mass is the
    flux-corrected quantity absorbed(T) + ||f(T)||^2 / 2; the residual is
    reported absolutely and relative to that radiated mass.
    """
    t = np.asarray(record.times)
    om = np.asarray(record.omega)
    sel = t >= t[-1] - 0.1 * (t[-1] - t[0])
    omega_plus = float(om[sel].mean())
    fT = record.f_norm[-1] if record.f_norm else 0.0
    radiated = record.absorbed[-1] + 0.5 * fT**2
    q0 = record.initial_mass
    resid = abs(family.q(omega_plus) - (q0 - radiated))
    rel = resid / radiated if radiated > 0 else (0.0 if resid < 1e-14 else float("inf"))
    if period is None:
        lam = family.reference.lambdas
        period = 2 * np.pi / lam[0] if len(lam) else 1.0
    mono = trend_is_monotone_convergent(t, om, period)
    return ScatteringResult(omega_plus=omega_plus, f_plus_norm=float(fT), radiated_mass=float(radiated),
                            relation_residual=float(resid), relative_residual=float(rel),
                            trend_monotone=mono)
