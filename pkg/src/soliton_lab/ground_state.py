"""Ground states of the stationary problem and their one-parameter family.

With the NLS written as iu_t = -Delta u + V u + beta(|u|^2) u, the standing
wave u = exp(i omega t) phi solves

    -Delta phi + V phi + omega phi + beta(phi^2) phi = 0 .

Newton's method is used on the discretized equation.  Its Jacobian is the
self-adjoint operator L+ = -Delta + V + omega + beta(phi^2) + 2 beta'(phi^2) phi^2,
and the same operator gives the frequency derivative through
L+ d_omega phi = -phi.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .grid_model import Grid, Model, energy, mass

logger = logging.getLogger(__name__)


class NewtonDivergence(RuntimeError):
    """Newton iteration did not converge; ``residual`` holds the last value."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class NotAGroundState(RuntimeError):
    """Converged to a solution that changes sign."""


@dataclass
class GroundState:
    omega: float
    phi: np.ndarray
    q: float
    e: float
    d: float
    residual: float
    dphi: Optional[np.ndarray] = None
    iterations: int = 0
    residual_history: List[float] = field(default_factory=list)

    @property
    def Phi(self) -> np.ndarray:
        return np.stack([self.phi, self.phi]).astype(complex)

    @property
    def dPhi(self) -> np.ndarray:
        if self.dphi is None:
            raise ValueError("frequency derivative not computed")
        return np.stack([self.dphi, self.dphi]).astype(complex)


def stationary_residual(phi: np.ndarray, model: Model, omega: float) -> np.ndarray:
    grid = model.grid
    return -grid.laplacian(phi) + (model.potential + omega + model.beta(phi**2)) * phi


def l_plus_diag(phi: np.ndarray, model: Model, omega: float) -> np.ndarray:
    s = phi**2
    nl = model.nonlinearity
    return model.potential + omega + nl.beta(s) + 2.0 * nl.s_dbeta(s)


def l_minus_diag(phi: np.ndarray, model: Model, omega: float) -> np.ndarray:
    return model.potential + omega + model.beta(phi**2)


def l_plus(phi, model, omega):
    """L+ in the grid storage format (dense for spectral grids, CSC otherwise)."""
    return model.grid.operator(l_plus_diag(phi, model, omega))


def l_minus(phi, model, omega):
    return model.grid.operator(l_minus_diag(phi, model, omega))


def _use_even_sector(model: Model, parity: Optional[str]) -> bool:
    if parity is None:
        return model.is_even
    if parity == "even":
        if model.grid.kind != "line1d":
            raise ValueError("parity restriction applies to line1d grids only")
        return True
    if parity == "full":
        return False
    raise ValueError(f"unknown parity {parity!r}")


def _sector_solver(A, grid: Grid, even: bool):
    """Factor A once (optionally restricted to the even sector); return a solve callable."""
    if even:
        E = grid.even_basis
        Ad = A.toarray() if hasattr(A, "toarray") else A
        lu = sla.lu_factor(E.T @ Ad @ E)
        return lambda rhs: E @ sla.lu_solve(lu, E.T @ rhs)
    if hasattr(A, "toarray"):
        import scipy.sparse.linalg as spla
        fac = spla.splu(A.tocsc())
        return fac.solve
    lu = sla.lu_factor(A)
    return lambda rhs: sla.lu_solve(lu, rhs)


def _solve_sector(A, rhs, grid: Grid, even: bool):
    return _sector_solver(A, grid, even)(rhs)


def default_guess(grid: Grid, omega: float, model: Optional[Model] = None) -> np.ndarray:
    """A sech profile with the amplitude and width of the cubic ground state.

    On the line this is the exact cubic soliton sqrt(2 omega / kappa)
    sech(sqrt(omega) x).  Radially the cubic 3-D profile is approximated by
    4.34 sech(1.7 r) at omega = kappa = 1, rescaled with the power law
    phi_omega(r) = omega^(1/(2q)) phi_1(sqrt(omega) r).
    """
    kappa, q = 1.0, 1.0
    nl = model.nonlinearity if model is not None else None
    if nl is not None and getattr(nl, "kappa", 0) > 0:
        kappa, q = nl.kappa, nl.q
    amp = (omega / kappa) ** (1.0 / (2.0 * q))
    if grid.kind == "radial3d":
        return 4.34 * amp / np.cosh(1.7 * np.sqrt(omega) * grid.radius)
    return np.sqrt(2.0) * amp / np.cosh(np.sqrt(omega) * grid.radius)


def petviashvili(model: Model, omega: float, phi0: np.ndarray, n_iter: int = 60,
                 even: bool = False) -> np.ndarray:
    """Petviashvili fixed-point iteration used to enter Newton's basin.

    Iterates phi <- M^g (-Delta + V + omega)^{-1} N(phi) with
    N(phi) = -beta(phi^2) phi and the stabilizing factor
    M = <phi, (-Delta+V+omega) phi> / <phi, N(phi)>, g = (2q+1)/(2q) for the
    power law (q = 1 for tabulated nonlinearities).
    """
    grid = model.grid
    A = grid.operator(model.potential + omega)
    q = getattr(model.nonlinearity, "q", 1.0)
    gexp = (2.0 * q + 1.0) / (2.0 * q)
    phi = np.abs(phi0)
    w = grid.weights
    solve = _sector_solver(A, grid, even)
    for _ in range(n_iter):
        N = -model.beta(phi**2) * phi
        Aphi = A @ phi
        M = np.sum(w * phi * Aphi) / np.sum(w * phi * N)
        if not np.isfinite(M) or M <= 0:
            break
        phi = M**gexp * solve(N)
        phi = np.abs(phi)
    return phi


def solve_ground_state(model: Model, grid: Optional[Grid] = None, omega: float = 1.0,
                       initial_guess: Optional[np.ndarray] = None, *,
                       parity: Optional[str] = None, tol: float = 1e-10,
                       step_tol: float = 1e-12, max_iter: int = 60,
                       derivative: str = "solve") -> GroundState:
    """Newton solve of the stationary equation at frequency ``omega``.

    Parameters
    ----------
    parity : {None, "even", "full"}
        On line grids with a symmetric potential the iteration runs in the
        reflection-even sector (None selects this automatically).  This
        removes the translational zero mode when V = 0.
    derivative : {"solve", "fd", "none"}
        How d_omega phi is computed: the linear solve L+ dphi = -phi, a
        centred difference with step 1e-4 omega, or not at all.
    """
    grid = grid or model.grid
    if omega <= 0:
        raise ValueError("omega must be positive")
    even = _use_even_sector(model, parity)
    if initial_guess is None:
        phi = petviashvili(model, omega, default_guess(grid, omega, model), even=even)
    else:
        phi = np.array(initial_guess, float)
    if not np.any(phi):
        raise ValueError("initial guess must be nonzero")
    if even:
        phi = 0.5 * (phi + phi[::-1])
    history = []
    res_norm = np.inf
    converged = False
    for it in range(1, max_iter + 1):
        F = stationary_residual(phi, model, omega)
        res_norm = float(np.max(np.abs(F)))
        history.append(res_norm)
        scale = max(float(np.max(np.abs(phi))), 1e-300)
        if res_norm <= tol * scale:
            converged = True
            break
        J = l_plus(phi, model, omega)
        step = _solve_sector(J, -F, grid, even)
        # non-monotone damping: full steps unless the residual explodes
        lam = 1.0
        for _ in range(20):
            trial = phi + lam * step
            if np.max(np.abs(stationary_residual(trial, model, omega))) < 10.0 * res_norm:
                break
            lam *= 0.5
        phi = phi + lam * step
        if np.max(np.abs(lam * step)) <= step_tol * scale:
            F = stationary_residual(phi, model, omega)
            res_norm = float(np.max(np.abs(F)))
            history.append(res_norm)
            converged = res_norm <= 1e3 * tol * scale
            break
    if not converged:
        raise NewtonDivergence(f"Newton failed at omega={omega}", res_norm)
    if np.max(phi) < 0:
        phi = -phi
    if np.min(phi) < -1e-8 * np.max(np.abs(phi)):
        raise NotAGroundState("not a ground state: solution changes sign")
    gs = _finish(model, grid, omega, phi, res_norm, len(history), history)
    if derivative == "solve":
        gs.dphi = _solve_sector(l_plus(phi, model, omega), -phi, grid, even)
    elif derivative == "fd":
        dw = 1e-4 * omega
        plus = solve_ground_state(model, grid, omega + dw, phi, parity=parity, derivative="none")
        minus = solve_ground_state(model, grid, omega - dw, phi, parity=parity, derivative="none")
        gs.dphi = (plus.phi - minus.phi) / (2 * dw)
    logger.debug("ground state omega=%.6g q=%.10g residual=%.2e in %d iterations",
                 omega, gs.q, res_norm, gs.iterations)
    return gs


def _finish(model, grid, omega, phi, res, iters, history) -> GroundState:
    Phi = np.stack([phi, phi]).astype(complex)
    q = mass(Phi, grid)
    e = energy(Phi, model, grid)
    return GroundState(omega=omega, phi=phi, q=q, e=e, d=e + omega * q, residual=res,
                       iterations=iters, residual_history=history)


def second_frequency_derivative(gs: GroundState, model: Model, parity: Optional[str] = None) -> np.ndarray:
    """d^2 phi / d omega^2 from differentiating L+ dphi = -phi once more."""
    nl = model.nonlinearity
    phi, dphi = gs.phi, gs.dphi
    s = phi**2
    # d/domega of the L+ potential is (6 beta' phi + 4 beta'' phi^3) dphi;
    # written through s*beta' and s^2*beta'' so fractional powers stay finite
    safe_phi = np.where(phi == 0, 1.0, phi)
    dpot = (6.0 * nl.s_dbeta(s) + 4.0 * nl.s2_d2beta(s)) / safe_phi
    rhs = -2.0 * dphi - dpot * dphi**2
    even = _use_even_sector(model, parity)
    return _solve_sector(l_plus(phi, model, gs.omega), rhs, model.grid, even)


@dataclass
class GroundStateFamily:
    samples: List[GroundState]
    dphi_domega: List[np.ndarray]
    qprime: np.ndarray
    truncated: bool = False
    diagnostic: str = ""

    @property
    def omegas(self) -> np.ndarray:
        return np.array([g.omega for g in self.samples])

    @property
    def q(self) -> np.ndarray:
        return np.array([g.q for g in self.samples])

    @property
    def e(self) -> np.ndarray:
        return np.array([g.e for g in self.samples])

    @property
    def d(self) -> np.ndarray:
        return np.array([g.d for g in self.samples])

    def q_of(self, omega):
        """Interpolated q(omega) (cubic through the samples)."""
        from scipy.interpolate import CubicSpline
        return CubicSpline(self.omegas, self.q)(omega)

    def omega_of_q(self, qval: float) -> float:
        """Invert q on the family by bracketing and Brent's method."""
        from scipy.interpolate import CubicSpline
        from scipy.optimize import brentq
        cs = CubicSpline(self.omegas, self.q)
        w = self.omegas
        return float(brentq(lambda x: cs(x) - qval, w[0], w[-1]))


def continue_family(model: Model, grid: Optional[Grid] = None,
                    omega_range: Sequence[float] = (0.5, 2.0), n_samples: int = 16, *,
                    parity: Optional[str] = None, derivative: str = "fd") -> GroundStateFamily:
    """Natural continuation in omega seeded from the midpoint solution.

    Each converged profile seeds its neighbour.  ``dphi_domega`` is computed
    by centred differences with step 1e-4 omega (``derivative="fd"``) or by
    the linear solve (``"solve"``).  A Newton failure truncates the family.
    """
    grid = grid or model.grid
    omegas = np.linspace(omega_range[0], omega_range[1], n_samples)
    mid = len(omegas) // 2
    center = solve_ground_state(model, grid, omegas[mid], parity=parity, derivative=derivative)
    sols = {mid: center}
    truncated, diag = False, ""
    for direction in (1, -1):
        prev = center
        idx = mid + direction
        while 0 <= idx < len(omegas):
            try:
                sol = solve_ground_state(model, grid, omegas[idx], prev.phi,
                                         parity=parity, derivative=derivative)
            except (NewtonDivergence, NotAGroundState) as exc:
                truncated = True
                diag = f"continuation stopped at omega={omegas[idx]:.6g}: {exc}"
                logger.warning(diag)
                break
            sols[idx] = sol
            prev = sol
            idx += direction
    keys = sorted(sols)
    samples = [sols[k] for k in keys]
    qprime = np.array([2.0 * float(np.sum(grid.weights * g.phi * g.dphi)) for g in samples])
    return GroundStateFamily(samples=samples, dphi_domega=[g.dphi for g in samples],
                             qprime=qprime, truncated=truncated, diagnostic=diag)


@dataclass
class HypothesisReport:
    qprime_signs: List[bool]
    h5: bool
    lplus_lowest: List[np.ndarray]
    lplus_smallest_abs: List[float]
    lminus_phi_residual: List[float]
    h6: List[bool]

    @property
    def h6_all(self) -> bool:
        return all(self.h6)


def lplus_spectrum(gs: GroundState, model: Model, parity: Optional[str] = None, k: int = 2):
    """Lowest eigenvalues and smallest |eigenvalue| of L+ as a symmetric matrix."""
    grid = model.grid
    A = l_plus(gs.phi, model, gs.omega)
    A = A.toarray() if hasattr(A, "toarray") else np.array(A)
    sq = grid.symmetrizer()
    A = sq[:, None] * A / sq[None, :]
    A = 0.5 * (A + A.T)
    if _use_even_sector(model, parity):
        E = grid.even_basis
        A = E.T @ A @ E
    vals = sla.eigvalsh(A)
    return vals[:k], float(np.min(np.abs(vals))), float(np.max(np.abs(vals)))


def check_H5_H6(family: GroundStateFamily, model: Model, grid: Optional[Grid] = None,
                parity: Optional[str] = None, zero_tol: float = 1e-6) -> HypothesisReport:
    """Sign of q' and the negative-eigenvalue count of L+ per sample.

    A numerically zero eigenvalue is one with |lambda| <= zero_tol times a
    unit scale; the 1-D V=0 translational mode is excluded by the even
    sector.
    """
    grid = grid or model.grid
    signs = [bool(qp > 0) for qp in family.qprime]
    lows, small, lres, h6 = [], [], [], []
    for gs in family.samples:
        vals, smallest, _ = lplus_spectrum(gs, model, parity)
        lows.append(vals)
        small.append(smallest)
        Lm = l_minus(gs.phi, model, gs.omega)
        lres.append(float(np.max(np.abs(Lm @ gs.phi))))
        n_neg = int(np.sum(vals < 0))
        h6.append(n_neg == 1 and smallest > zero_tol)
    return HypothesisReport(qprime_signs=signs, h5=all(signs), lplus_lowest=lows,
                            lplus_smallest_abs=small, lminus_phi_residual=lres, h6=h6)
