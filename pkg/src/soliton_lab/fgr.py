"""Fermi golden rule coefficients by limiting absorption.

The damping of the internal modes is governed by quadratic forms

    Gamma = 2 r Im <R+(r) G, sigma3 conj(G)>,    R+(r) = lim_{eps -> 0+} (H - r - i eps)^{-1},

evaluated at resonant frequencies r = lambda . alpha above the threshold
omega.  On a bounded grid the outgoing limit is emulated by a complex
absorbing ramp -i W in the outer part of the box; eps is then sent to zero by
Richardson extrapolation with the ramp held fixed.

Resonant inputs are grouped in :class:`ResonantLevel` objects, one per
frequency r, holding the fields G_alpha multiplying z^alpha in the radiation
equation i f_t - H f = sum_alpha z^alpha G_alpha + (conjugate terms).
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid_model import Grid, absorber_profile, auto_absorber_strength, pairing, s1, s3, thread_count
from .linearization import LinearizedOperator, SpectralData, quadratic_field

logger = logging.getLogger(__name__)


class ResolventBreakdown(RuntimeError):
    """The shifted operator is numerically singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


# ---------------------------------------------------------------------------
# Input containers
# ---------------------------------------------------------------------------

@dataclass
class ResonantLevel:
    """All resonant monomials z^alpha sharing the frequency r = lambda . alpha."""

    r: float
    alphas: List[Tuple[int, ...]]
    fields: np.ndarray            # (k, 2, n), G_alpha in Ran Pc

    def combine(self, zeta: np.ndarray) -> np.ndarray:
        """The field sum_alpha zeta^alpha G_alpha."""
        w = monomials(zeta, self.alphas)
        return np.tensordot(w, self.fields, axes=(0, 0))


@dataclass
class FgrInputs:
    omega0: float
    lambdas: np.ndarray
    levels: List[ResonantLevel] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.lambdas)

    def is_empty(self) -> bool:
        return not self.levels or all(not np.any(lv.fields) for lv in self.levels)


def monomials(zeta: np.ndarray, alphas: Sequence[Tuple[int, ...]]) -> np.ndarray:
    zeta = np.asarray(zeta, complex)
    return np.array([np.prod(zeta ** np.asarray(a)) for a in alphas], dtype=complex)


def resonant_multi_indices(lambdas: Sequence[float], omega0: float, max_order: Optional[int] = None,
                           tol: float = 1e-9) -> Dict[float, List[Tuple[int, ...]]]:
    """Minimal resonances alpha in N^m, grouped by r = lambda . alpha.

    alpha qualifies when lambda . alpha > omega0 while lambda . alpha - lambda_k < omega0
    for every k with alpha_k != 0, that is, alpha reaches the continuum but
    removing any one quantum falls back below it.
    """
    lambdas = np.asarray(lambdas, float)
    m = len(lambdas)
    if m == 0:
        return {}
    if max_order is None:
        max_order = int(np.floor(omega0 / lambdas.min())) + 1
    groups: Dict[float, List[Tuple[int, ...]]] = {}
    for alpha in itertools.product(range(max_order + 1), repeat=m):
        if sum(alpha) == 0 or sum(alpha) > max_order:
            continue
        r = float(np.dot(alpha, lambdas))
        if r <= omega0 + tol:
            continue
        if any(a and r - lambdas[k] >= omega0 - tol for k, a in enumerate(alpha)):
            continue
        key = next((k for k in groups if abs(k - r) < tol * max(1.0, r)), r)
        groups.setdefault(key, []).append(tuple(int(a) for a in alpha))
    return dict(sorted(groups.items()))


def leading_order_inputs(spec: SpectralData, model, omega0: Optional[float] = None) -> FgrInputs:
    """Resonant inputs read off the quadratic nonlinearity.

    Valid when every minimal resonance has order two (N = 1 for all modes):
    then the coefficient of z^alpha in Pc Q(D, D), with D = sum z_j xi_j + conj z_j sigma1 xi_j,
    is the radiation forcing and no normal-form step alters it.
    """
    omega0 = spec.omega if omega0 is None else omega0
    groups = resonant_multi_indices(spec.lambdas, omega0)
    levels = []
    for r, alphas in groups.items():
        if any(sum(a) != 2 for a in alphas):
            raise ValueError("resonances of order above two need the normal-form driver")
        fields = []
        for a in alphas:
            idx = [j for j, k in enumerate(a) for _ in range(k)]
            j, l = idx
            xj, xl = spec.xis[j].astype(complex), spec.xis[l].astype(complex)
            weight = 1.0 if j == l else 2.0
            fields.append(spec.Pc(weight * quadratic_field(xj, xl, spec.phi, model)))
        levels.append(ResonantLevel(r=r, alphas=list(alphas), fields=np.array(fields)))
    return FgrInputs(omega0=omega0, lambdas=np.array(spec.lambdas, float), levels=levels)


# ---------------------------------------------------------------------------
# Resolvent with absorbing layer
# ---------------------------------------------------------------------------

_SIGMA3_SIGNS = np.array([1.0, -1.0])[:, None]


def default_epsilon(grid: Grid) -> float:
    """Four times the squared momentum resolution of the grid."""
    return 4.0 * grid.momentum_resolution**2


def outgoing_operator(Hop: LinearizedOperator, r: float, absorber="auto",
                      fraction: float = 0.2) -> LinearizedOperator:
    """Hop with an absorbing ramp tuned to the outgoing wavenumber sqrt(|r| - omega).

    ``absorber`` is "auto", a ramp height, an explicit profile array, or None
    (keep whatever Hop carries).
    """
    if absorber is None:
        return Hop
    if isinstance(absorber, str):
        if absorber != "auto":
            raise ValueError(f"unknown absorber setting {absorber!r}")
        k = np.sqrt(max(abs(r) - Hop.omega, 0.0))
        W = absorber_profile(Hop.grid, auto_absorber_strength(k, Hop.grid, fraction), fraction)
    elif np.ndim(absorber) == 0:
        W = absorber_profile(Hop.grid, float(absorber), fraction)
    else:
        W = np.asarray(absorber, float)
    return Hop.with_absorber(W)


class ShiftedSolver:
    """Factorization of H - z for repeated solves at one complex shift z."""

    def __init__(self, Hop: LinearizedOperator, z: complex):
        self.Hop = Hop
        self.z = complex(z)
        n2 = 2 * Hop.grid.n
        M = Hop.matrix()
        if sp.issparse(M):
            M = (M - self.z * sp.identity(n2, format="csr")).tocsc()
            try:
                self._lu = spla.splu(M)
            except RuntimeError as exc:
                raise ResolventBreakdown(str(exc), np.inf) from exc
            self._solve = self._lu.solve
        else:
            M = np.asarray(M, complex) - self.z * np.eye(n2)
            lu = sla.lu_factor(M, check_finite=False)
            piv_min = np.min(np.abs(np.diag(lu[0])))
            piv_max = np.max(np.abs(np.diag(lu[0])))
            if piv_min == 0 or piv_max / piv_min > 1e14:
                cond = np.inf if piv_min == 0 else piv_max / piv_min
                raise ResolventBreakdown("shifted operator is singular", cond)
            self._solve = lambda b: sla.lu_solve(lu, b, check_finite=False)

    def solve(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, complex)
        n = self.Hop.grid.n
        flat = G.reshape(-1, 2 * n).T
        out = self._solve(flat)
        if not np.all(np.isfinite(out)):
            raise ResolventBreakdown("non-finite resolvent solution", np.inf)
        return out.T.reshape(G.shape)


def resolvent_quadratic_form(Hop: LinearizedOperator, r: float, eps: float, G: np.ndarray,
                             absorber="auto") -> complex:
    """<(H - r - i eps)^{-1} G, sigma3 conj(G)> with an outgoing absorbing layer."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    op = outgoing_operator(Hop, r, absorber)
    Y = ShiftedSolver(op, r + 1j * eps).solve(G)
    return pairing(Y, s3(np.conj(G)), Hop.grid)


def richardson(values: Sequence, ratio: float = 2.0):
    """Extrapolate samples at eps, eps/ratio, eps/ratio^2 to eps = 0.

    Assumes F(eps) = F0 + a eps + b eps^2.  Returns (F0, error estimate), where
    the error is the distance to the two-point linear extrapolation.
    """
    f1, f2, f3 = [np.asarray(v) for v in values]
    q = ratio
    # weights solving the 3x3 Vandermonde system at nodes 1, 1/q, 1/q^2
    nodes = np.array([1.0, 1.0 / q, 1.0 / q**2])
    V = np.vander(nodes, 3, increasing=True)
    w = np.linalg.solve(V.T, np.array([1.0, 0.0, 0.0]))
    f0 = w[0] * f1 + w[1] * f2 + w[2] * f3
    linear = (q * f3 - f2) / (q - 1.0)
    return f0, np.abs(f0 - linear)


@dataclass
class LevelForm:
    """Extrapolated pairing matrix M_ab = <R+(r) G_a, sigma3 conj(G_b)> for one level."""

    level: ResonantLevel
    epsilons: List[float]
    samples: np.ndarray            # (3, k, k) at each eps
    matrix: np.ndarray             # (k, k) extrapolated
    error: np.ndarray              # (k, k) extrapolation error estimate
    converged: bool
    solutions: Optional[np.ndarray] = None   # extrapolated R+(r) G_a, (k, 2, n)

    def value(self, zeta: np.ndarray):
        w = monomials(zeta, self.level.alphas)
        val = w @ self.matrix @ np.conj(w)
        err = np.abs(w) @ self.error @ np.abs(w)
        return val, err


def _convergence_gate(samples: np.ndarray, factor: float = 1.5) -> bool:
    """Successive differences of the imaginary part shrink by at least ``factor``."""
    im = np.imag(samples)
    d1 = np.max(np.abs(im[0] - im[1]))
    d2 = np.max(np.abs(im[1] - im[2]))
    scale = max(np.max(np.abs(im)), 1e-300)
    if d2 <= 1e-12 * scale:
        return True
    return bool(d1 >= factor * d2)


def level_form(Hop: LinearizedOperator, level: ResonantLevel, eps0: Optional[float] = None,
               absorber="auto", jobs: Optional[int] = None, keep_solutions: bool = False) -> LevelForm:
    """Pairing matrix of one level at eps0, eps0/2, eps0/4, extrapolated to eps = 0."""
    grid = Hop.grid
    if level.r <= Hop.omega:
        raise ValueError(f"frequency {level.r} is below the continuum threshold {Hop.omega}")
    eps0 = default_epsilon(grid) if eps0 is None else float(eps0)
    epsilons = [eps0, eps0 / 2.0, eps0 / 4.0]
    op = outgoing_operator(Hop, level.r, absorber)
    duals = np.conj(level.fields) * _SIGMA3_SIGNS

    def run(eps):
        Y = ShiftedSolver(op, level.r + 1j * eps).solve(level.fields)
        M = np.array([[pairing(Y[a], duals[b], grid) for b in range(len(duals))]
                      for a in range(len(Y))])
        return M, Y

    workers = min(thread_count(jobs), len(epsilons))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, epsilons))
    else:
        results = [run(e) for e in epsilons]
    samples = np.array([res[0] for res in results])
    M0, err = richardson(samples)
    sols = None
    if keep_solutions:
        sols, _ = richardson([res[1] for res in results])
    converged = _convergence_gate(samples)
    if not converged:
        logger.warning("eps extrapolation did not settle at r=%.6g", level.r)
    return LevelForm(level=level, epsilons=epsilons, samples=samples, matrix=M0,
                     error=err, converged=converged, solutions=sols)


# ---------------------------------------------------------------------------
# Gamma and (H11)
# ---------------------------------------------------------------------------

@dataclass
class FgrResult:
    r: List[float]
    Gamma: float
    level_gammas: List[float]
    epsilons: List[float]
    extrapolation_error: float
    converged: bool
    inputs: List[np.ndarray]
    flags: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.converged and not self.flags

    def as_dict(self) -> dict:
        return {"r": [float(x) for x in self.r], "Gamma": float(self.Gamma),
                "level_gammas": [float(x) for x in self.level_gammas],
                "epsilons": [float(x) for x in self.epsilons],
                "extrapolation_error": float(self.extrapolation_error),
                "converged": bool(self.converged), "flags": list(self.flags)}


def level_forms(Hop: LinearizedOperator, fgr_inputs: FgrInputs, eps0: Optional[float] = None,
                absorber="auto", jobs: Optional[int] = None) -> List[LevelForm]:
    return [level_form(Hop, lv, eps0, absorber, jobs) for lv in fgr_inputs.levels]


def gamma_from_forms(forms: Sequence[LevelForm], zeta: np.ndarray) -> FgrResult:
    zeta = np.asarray(zeta, complex)
    gammas, errs, inputs = [], [], []
    for lf in forms:
        val, err = lf.value(zeta)
        gammas.append(2.0 * lf.level.r * float(np.imag(val)))
        errs.append(2.0 * lf.level.r * float(err))
        inputs.append(lf.level.combine(zeta))
    converged = all(lf.converged for lf in forms)
    flags = [] if converged else ["eps-extrapolation-not-converged"]
    total = float(np.sum(gammas)) if gammas else 0.0
    return FgrResult(r=[lf.level.r for lf in forms], Gamma=total, level_gammas=gammas,
                     epsilons=forms[0].epsilons if forms else [], extrapolation_error=float(np.sum(errs)),
                     converged=converged, inputs=inputs, flags=flags)


def gamma_coefficient(Hop: LinearizedOperator, spec: Optional[SpectralData], fgr_inputs: FgrInputs,
                      zeta, eps0: Optional[float] = None, absorber="auto",
                      jobs: Optional[int] = None, range_tol: float = 1e-8) -> FgrResult:
    """Sum over resonant levels of 2 r Im <R+(r) G, sigma3 conj(G)>, G = sum zeta^alpha G_alpha."""
    if not fgr_inputs.levels:
        raise ValueError("no resonant inputs")
    if spec is not None:
        for lv in fgr_inputs.levels:
            for G in lv.fields:
                scale = max(np.max(np.abs(G)), 1e-300)
                if np.max(np.abs(spec.Pd(G))) > range_tol * scale:
                    raise ValueError("resonant input field is not in the continuous subspace")
    return gamma_from_forms(level_forms(Hop, fgr_inputs, eps0, absorber, jobs), zeta)


def decay_rate(result: FgrResult, lambdas: Sequence[float]) -> float:
    """Constant Gamma_z in d|z|^2/dt = -Gamma_z |z|^(2N+2) for a single internal mode.

    The mode energy lambda |z|^2 loses 2 r Im<...> |z|^(2N+2) per unit time,
    hence Gamma_z = Gamma / lambda.
    """
    lambdas = np.asarray(lambdas, float)
    if len(lambdas) != 1:
        raise ValueError("decay constant defined here for a single internal mode")
    return result.Gamma / float(lambdas[0])


def direct_decay_rate(Hop: LinearizedOperator, spec: SpectralData, model,
                      eps0: Optional[float] = None, absorber="auto") -> Tuple[float, float]:
    """Decay constant of one mode with N = 1 from the cubic term of its own equation.

    Substituting the slaved radiation f = -z^2 R+(2 lambda) Pc Q(xi, xi) into
    z = <sigma3 xi, R> gives i z_t = lambda z + c |z|^2 z with
    c = 2 <sigma3 xi, Q(sigma1 xi, f / z^2)>, so d|z|^2/dt = 2 Im(c) |z|^4.
    Returns (Gamma_z, extrapolation error).
    """
    if spec.m != 1 or spec.N != 1:
        raise ValueError("direct route needs one internal mode with N = 1")
    xi = spec.xis[0].astype(complex)
    r = 2.0 * float(spec.lambdas[0])
    F = spec.Pc(quadratic_field(xi, xi, spec.phi, model))
    eps0 = default_epsilon(Hop.grid) if eps0 is None else float(eps0)
    op = outgoing_operator(Hop, r, absorber)
    vals = []
    for eps in (eps0, eps0 / 2.0, eps0 / 4.0):
        Y = -ShiftedSolver(op, r + 1j * eps).solve(F)
        c = 2.0 * pairing(s3(xi), quadratic_field(s1(xi), Y, spec.phi, model), Hop.grid)
        vals.append(-2.0 * np.imag(c))
    val, err = richardson(vals)
    return float(val), float(err)


@dataclass
class H11Report:
    n_samples: int
    min_ratio: float
    max_ratio: float
    threshold: float
    verdict: bool
    min_form_eigenvalue: float

    def as_dict(self) -> dict:
        return {"n_samples": self.n_samples, "min_ratio": self.min_ratio,
                "max_ratio": self.max_ratio, "threshold": self.threshold,
                "verdict": self.verdict, "min_form_eigenvalue": self.min_form_eigenvalue}


def _hermitian_part(M: np.ndarray) -> np.ndarray:
    """Matrix K with Im(w^T M conj(w)) = w^T K conj(w) for all w."""
    return (M - M.conj().T) / 2j


def check_H11(Hop: Optional[LinearizedOperator], spec: Optional[SpectralData], fgr_inputs: FgrInputs,
              n_samples: int = 200, threshold: float = 1e-6, seed: int = 0,
              forms: Optional[Sequence[LevelForm]] = None, eps0: Optional[float] = None,
              absorber="auto", jobs: Optional[int] = None) -> H11Report:
    """Sample zeta on the unit sphere and compare the FGR form with sum |zeta^alpha|^2."""
    n_samples = max(int(n_samples), 200)
    if fgr_inputs.is_empty() or fgr_inputs.m == 0:
        return H11Report(n_samples, 0.0, 0.0, threshold, False, 0.0)
    if forms is None:
        forms = level_forms(Hop, fgr_inputs, eps0, absorber, jobs)
    rng = np.random.default_rng(seed)
    m = fgr_inputs.m
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        zeta = rng.normal(size=m) + 1j * rng.normal(size=m)
        zeta /= np.linalg.norm(zeta)
        lhs = 0.0
        comparison = 0.0
        for lf in forms:
            w = monomials(zeta, lf.level.alphas)
            lhs += lf.level.r * float(np.imag(w @ lf.matrix @ np.conj(w)))
            comparison += float(np.sum(np.abs(w) ** 2))
        ratios[i] = lhs / comparison if comparison > 0 else 0.0
    eig_min = min(float(np.min(np.linalg.eigvalsh(lf.level.r * _hermitian_part(lf.matrix))))
                  for lf in forms)
    lo, hi = float(ratios.min()), float(ratios.max())
    return H11Report(n_samples, lo, hi, threshold, bool(lo > threshold), eig_min)


# ---------------------------------------------------------------------------
# Free-space reference
# ---------------------------------------------------------------------------

def free_kernel_form(G1: np.ndarray, grid: Grid, k: float) -> float:
    """Im <(-d^2/dx^2 - k^2 - i0)^{-1} G1, conj(G1)> on the line by direct quadrature.

    The outgoing kernel is i exp(i k |x - y|) / (2k); its imaginary part
    cos(k (x - y)) / (2k) gives the average of |int G1 exp(+-i k x) dx|^2 over both signs,
    divided by 2k.
    """
    if grid.kind != "line1d":
        raise ValueError("free kernel quadrature implemented on line1d grids")
    x = grid.nodes
    plus = np.sum(grid.weights * G1 * np.exp(1j * k * x))
    minus = np.sum(grid.weights * G1 * np.exp(-1j * k * x))
    return float((np.abs(plus) ** 2 + np.abs(minus) ** 2) / (4.0 * k))
