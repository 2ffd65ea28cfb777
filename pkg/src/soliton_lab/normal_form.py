"""Polynomial Hamiltonians in the coordinates (z, f) and Birkhoff normal forms.

Monomials come in two shapes:

* scalar terms  a(rho) z^mu conj(z)^nu,
* vector terms  z^mu conj(z)^nu <sigma1 sigma3 G(rho), f>   with G in Ran Pc(omega0),

where rho = ||f||_2^2 and every coefficient is a polynomial in rho truncated
at a fixed degree.  The quadratic part

    D2 = sum_j lambda_j(rho) |z_j|^2 + 1/2 <sigma1 sigma3 H f, f>

is kept apart.  The Poisson bracket is

    {F, G} = -i sum_j (dF/dz_j dG/dzbar_j - dF/dzbar_j dG/dz_j) - i <grad_f F, sigma3 sigma1 grad_f G>,

so that i z_j' = dH/dzbar_j and i f' = H f + ... for the flow of H.
Products that are quadratic in f cannot be stored in this algebra; they are
dropped and their coefficient norm is reported as remainder.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .fgr import FgrInputs, ResonantLevel, resonant_multi_indices
from .grid_model import Grid, Model, l2_norm, pairing, s1, s1s3, s3, s3s1, weighted_norm
from .linearization import LinearizedOperator, SpectralData

logger = logging.getLogger(__name__)

Key = Tuple[Tuple[int, ...], Tuple[int, ...]]


class ContractViolation(ValueError):
    """A term handed to the homological solver is already in normal form."""


class SmallDenominator(ArithmeticError):
    """The homological equation is resonant for the given monomial."""

    def __init__(self, key: Key, value: float, reason: str):
        super().__init__(f"small denominator / resonant at mu={key[0]}, nu={key[1]}: "
                         f"lambda.(mu-nu) = {value:.6g} ({reason})")
        self.key = key
        self.value = value


class RadiusTooLarge(RuntimeError):
    """The Lie transform step size underflowed; the state is outside the small ball."""


# ---------------------------------------------------------------------------
# rho-polynomials
# ---------------------------------------------------------------------------

def _rho_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated product of rho-polynomials; b may carry trailing field axes."""
    P = a.shape[0]
    out = np.zeros(b.shape, dtype=complex)
    for i in range(P):
        if a[i] == 0:
            continue
        out[i:] += a[i] * b[:P - i]
    return out


def _rho_derivative(a: np.ndarray) -> np.ndarray:
    P = a.shape[0]
    out = np.zeros_like(a, dtype=complex)
    if P > 1:
        k = np.arange(1, P).reshape((-1,) + (1,) * (a.ndim - 1))
        out[:-1] = a[1:] * k
    return out


def _rho_eval(a: np.ndarray, rho: float):
    return sum(a[p] * rho**p for p in range(a.shape[0]))


# ---------------------------------------------------------------------------
# Quadratic part
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class D2Data:
    """Quadratic Hamiltonian sum lambda_j(rho)|z_j|^2 + 1/2 <sigma1 sigma3 H f, f>."""

    lambdas: np.ndarray
    Hop: LinearizedOperator
    spec: SpectralData
    omega0: float
    lambda_rho: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, float)
        if self.lambda_rho is None:
            self.lambda_rho = np.zeros_like(self.lambdas)
        self.lambda_rho = np.asarray(self.lambda_rho, float)
        self._shift_cache: Dict[float, tuple] = {}

    @property
    def m(self) -> int:
        return len(self.lambdas)

    @property
    def grid(self) -> Grid:
        return self.Hop.grid

    def lambda_poly(self, P: int) -> np.ndarray:
        """lambda_j(rho) as (P, m) coefficient array."""
        out = np.zeros((P, self.m))
        out[0] = self.lambdas
        if P > 1:
            out[1] = self.lambda_rho
        return out

    def frequency(self, key: Key, P: int) -> np.ndarray:
        """rho-polynomial lambda(rho) . (mu - nu)."""
        d = np.subtract(key[0], key[1])
        return self.lambda_poly(P) @ d

    def Pc(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, complex)
        if G.ndim == 2:
            return self.spec.Pc(G)
        return np.array([self.Pc(g) for g in G])

    def apply_H(self, G: np.ndarray) -> np.ndarray:
        return self.Hop.apply(G)

    def evaluate(self, z: np.ndarray, f: np.ndarray, rho: Optional[float] = None) -> complex:
        rho = float(np.real(pairing(f, s1(f), self.grid))) if rho is None else rho
        lam = self.lambdas + self.lambda_rho * rho
        zz = np.abs(np.asarray(z)) ** 2
        return complex(np.dot(lam, zz) + 0.5 * pairing(s1s3(self.Hop.apply(f)), f, self.grid))

    def _shifted_factor(self, x: float):
        """LU of H - x + sigma Pd, invertible on the whole space for |x| < omega0."""
        key = round(float(x), 14)
        if key not in self._shift_cache:
            n = self.grid.n
            M = np.asarray(self.Hop.matrix(sparse=False), complex)
            B = self.spec.basis.reshape(-1, 2 * n)
            D = (self.spec.dual * np.stack([self.grid.weights] * 2)).reshape(-1, 2 * n)
            sigma = 2.0 * self.omega0 + 1.0
            M = M - x * np.eye(2 * n) + sigma * (B.T @ D)
            self._shift_cache[key] = sla.lu_factor(M, check_finite=False)
        return self._shift_cache[key]

    def resolve(self, x: float, K: np.ndarray) -> np.ndarray:
        """(H - x)^{-1} K on Ran Pc for a real x in the spectral gap."""
        n = self.grid.n
        lu = self._shifted_factor(x)
        Y = sla.lu_solve(lu, np.asarray(K, complex).reshape(2 * n), check_finite=False)
        return self.spec.Pc(Y.reshape(2, n))


# ---------------------------------------------------------------------------
# Polynomial Hamiltonian
# ---------------------------------------------------------------------------

def _deg(key: Key) -> int:
    return int(sum(key[0]) + sum(key[1]))


def _conj_key(key: Key) -> Key:
    return (key[1], key[0])


def _add_keys(k1: Key, k2: Key) -> Key:
    return (tuple(np.add(k1[0], k2[0]).tolist()), tuple(np.add(k1[1], k2[1]).tolist()))


def _monomial(key: Key, z: np.ndarray) -> complex:
    z = np.asarray(z, complex)
    return complex(np.prod(z ** np.asarray(key[0])) * np.prod(np.conj(z) ** np.asarray(key[1])))


@dataclass(eq=False)
class PolyHam:
    """Scalar and vector monomials with rho-polynomial coefficients (plus an optional D2)."""

    m: int
    n: int
    rho_degree: int = 1
    scalars: Dict[Key, np.ndarray] = field(default_factory=dict)
    vectors: Dict[Key, np.ndarray] = field(default_factory=dict)
    quad: Optional[D2Data] = None
    max_degree: int = 3
    grid: Optional[Grid] = None

    @property
    def P(self) -> int:
        return self.rho_degree + 1

    def empty_like(self) -> "PolyHam":
        return PolyHam(self.m, self.n, self.rho_degree, {}, {}, None, self.max_degree, self.grid)

    def copy(self) -> "PolyHam":
        return PolyHam(self.m, self.n, self.rho_degree,
                       {k: v.copy() for k, v in self.scalars.items()},
                       {k: v.copy() for k, v in self.vectors.items()},
                       self.quad, self.max_degree, self.grid)

    # degree of a stored coefficient slice: monomial degree + (1 for vectors) + 2 rho-power
    @staticmethod
    def term_degree(key: Key, vector: bool, rho_power: int = 0) -> int:
        return _deg(key) + (1 if vector else 0) + 2 * rho_power

    def add_scalar(self, key: Key, coef) -> None:
        c = np.zeros(self.P, dtype=complex)
        coef = np.atleast_1d(np.asarray(coef, complex))
        c[:min(self.P, coef.shape[0])] = coef[:self.P]
        if key in self.scalars:
            self.scalars[key] = self.scalars[key] + c
        else:
            self.scalars[key] = c

    def add_vector(self, key: Key, fields) -> None:
        fields = np.asarray(fields, complex)
        if fields.ndim == 2:
            fields = fields[None]
        G = np.zeros((self.P, 2, self.n), dtype=complex)
        G[:min(self.P, fields.shape[0])] = fields[:self.P]
        if key in self.vectors:
            self.vectors[key] = self.vectors[key] + G
        else:
            self.vectors[key] = G

    def __add__(self, other: "PolyHam") -> "PolyHam":
        out = self.copy()
        for k, v in other.scalars.items():
            out.add_scalar(k, v)
        for k, v in other.vectors.items():
            out.add_vector(k, v)
        out.quad = self.quad or other.quad
        return out

    def scaled(self, c: complex) -> "PolyHam":
        out = self.copy()
        out.scalars = {k: c * v for k, v in out.scalars.items()}
        out.vectors = {k: c * v for k, v in out.vectors.items()}
        return out

    # -- norms and bookkeeping ------------------------------------------------
    def _field_norm(self, G: np.ndarray) -> float:
        if self.grid is None:
            return float(np.sqrt(np.sum(np.abs(G) ** 2)))
        return l2_norm(G, self.grid)

    def slices(self):
        """Iterate (kind, key, rho_power, degree, norm) over stored coefficient slices."""
        for k, c in self.scalars.items():
            for p in range(self.P):
                yield "scalar", k, p, self.term_degree(k, False, p), float(abs(c[p]))
        for k, G in self.vectors.items():
            for p in range(self.P):
                yield "vector", k, p, self.term_degree(k, True, p), self._field_norm(G[p])

    def truncate(self, max_degree: Optional[int] = None, tol: float = 0.0) -> Dict[int, float]:
        """Zero every slice above ``max_degree``; return dropped norms per degree."""
        max_degree = self.max_degree if max_degree is None else max_degree
        dropped: Dict[int, float] = {}
        for kind, k, p, d, nrm in list(self.slices()):
            if d > max_degree or nrm <= tol:
                if d > max_degree and nrm > 0:
                    dropped[d] = dropped.get(d, 0.0) + nrm
                store = self.scalars if kind == "scalar" else self.vectors
                store[k][p] = 0
        for store in (self.scalars, self.vectors):
            for k in [k for k, c in store.items() if not np.any(c)]:
                del store[k]
        return dropped

    def coefficient_norm(self) -> float:
        vals = [nrm for *_, nrm in self.slices()]
        return float(max(vals)) if vals else 0.0

    def max_norm_by_degree(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for _, _, _, d, nrm in self.slices():
            out[d] = max(out.get(d, 0.0), nrm)
        return out

    def restrict(self, predicate) -> "PolyHam":
        """Sub-Hamiltonian of the slices for which predicate(kind, key, p) holds."""
        out = self.empty_like()
        for k, c in self.scalars.items():
            sel = np.array([c[p] if predicate("scalar", k, p) else 0 for p in range(self.P)])
            if np.any(sel):
                out.add_scalar(k, sel)
        for k, G in self.vectors.items():
            sel = np.array([G[p] if predicate("vector", k, p) else 0 * G[p] for p in range(self.P)])
            if np.any(sel):
                out.add_vector(k, sel)
        return out

    def reality_defect(self) -> float:
        """max |a_mn - conj(a_nm)| and max ||G_mn + sigma1 conj(G_nm)||."""
        worst = 0.0
        for k, c in self.scalars.items():
            other = self.scalars.get(_conj_key(k), np.zeros_like(c))
            worst = max(worst, float(np.max(np.abs(c - np.conj(other)))))
        for k, G in self.vectors.items():
            other = self.vectors.get(_conj_key(k), np.zeros_like(G))
            worst = max(worst, self._field_norm(G + np.conj(other[:, ::-1, :])))
        return worst

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, z, f, rho: Optional[float] = None, include_quadratic: bool = True) -> complex:
        z = np.atleast_1d(np.asarray(z, complex))
        grid = self.grid
        if rho is None:
            rho = float(np.real(pairing(f, s1(f), grid)))
        total = 0j
        for k, c in self.scalars.items():
            total += _rho_eval(c, rho) * _monomial(k, z)
        for k, G in self.vectors.items():
            total += _monomial(k, z) * pairing(s1s3(_rho_eval(G, rho)), f, grid)
        if include_quadratic and self.quad is not None:
            total += self.quad.evaluate(z, f, rho)
        return complex(total)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass
class NormalFormClassifier:
    lambda0: np.ndarray
    omega0: float
    tolerance: float = 1e-9

    NULL = "null"
    OSCILLATORY = "oscillatory-nonresonant"
    CONTINUOUS = "continuous-resonant"

    def frequency(self, key: Key) -> float:
        return float(np.dot(self.lambda0, np.subtract(key[0], key[1])))

    def classify(self, key: Key) -> str:
        x = self.frequency(key)
        if abs(x) <= self.tolerance:
            return self.NULL
        if abs(x) > self.omega0 + self.tolerance:
            return self.CONTINUOUS
        return self.OSCILLATORY

    def is_normal(self, kind: str, key: Key) -> bool:
        cls = self.classify(key)
        if kind == "scalar":
            return cls == self.NULL
        return cls == self.CONTINUOUS


# ---------------------------------------------------------------------------
# Brackets
# ---------------------------------------------------------------------------

def _z_bracket(k1: Key, k2: Key, m: int):
    """{z^mu1 zbar^nu1, z^mu2 zbar^nu2} as a list of (coefficient, key)."""
    out = []
    mu1, nu1 = k1
    mu2, nu2 = k2
    for j in range(m):
        c = -1j * (mu1[j] * nu2[j] - nu1[j] * mu2[j])
        if c == 0:
            continue
        mu = list(np.add(mu1, mu2))
        nu = list(np.add(nu1, nu2))
        mu[j] -= 1
        nu[j] -= 1
        out.append((c, (tuple(int(x) for x in mu), tuple(int(x) for x in nu))))
    return out


@dataclass
class BracketResult:
    terms: PolyHam
    dropped: Dict[int, float] = field(default_factory=dict)

    def note(self, degree: int, amount: float):
        if amount > 0:
            self.dropped[degree] = self.dropped.get(degree, 0.0) + amount


def _pc(template: PolyHam, quad: Optional[D2Data], G: np.ndarray) -> np.ndarray:
    return quad.Pc(G) if quad is not None else G


def poisson_bracket(F: PolyHam, G: PolyHam, quad: Optional[D2Data] = None,
                    max_degree: Optional[int] = None) -> BracketResult:
    """{F, G} for the polynomial parts of F and G (their D2 parts are ignored).

    Terms quadratic in f (vector-vector z-channel) are dropped and reported.
    """
    quad = quad or F.quad or G.quad
    out = F.empty_like()
    out.grid = F.grid or G.grid
    res = BracketResult(out)
    grid = out.grid
    m = F.m

    # scalar x scalar: z-channel only (the f-channel of two rho-functions vanishes)
    for k1, a in F.scalars.items():
        for k2, b in G.scalars.items():
            ab = _rho_mul(a, b)
            for c, k in _z_bracket(k1, k2, m):
                out.add_scalar(k, c * ab)

    def scalar_vector(k1, a, k2, Gv, sign):
        for c, k in _z_bracket(k1, k2, m):
            out.add_vector(k, sign * c * _rho_mul(a, Gv))
        da = _rho_derivative(a)
        if np.any(da):
            kk = _add_keys(k1, k2)
            s3G = Gv.copy()
            s3G[:, 1] *= -1
            out.add_vector(kk, sign * (-2j) * _pc(out, quad, _rho_mul(da, s3G)))

    for k1, a in F.scalars.items():
        for k2, Gv in G.vectors.items():
            scalar_vector(k1, a, k2, Gv, 1.0)
    for k1, Fv in F.vectors.items():
        for k2, b in G.scalars.items():
            scalar_vector(k2, b, k1, Fv, -1.0)

    # vector x vector: f-channel gives a scalar, z-channel is quadratic in f
    for k1, Fv in F.vectors.items():
        for k2, Gv in G.vectors.items():
            kk = _add_keys(k1, k2)
            P = F.P
            coef = np.zeros(P, dtype=complex)
            for i in range(P):
                for j in range(P - i):
                    coef[i + j] += -1j * pairing(s1s3(Fv[i]), Gv[j], grid)
            out.add_scalar(kk, coef)
            zb = _z_bracket(k1, k2, m)
            if zb:
                amt = sum(abs(c) for c, _ in zb) * out._field_norm(Fv[0]) * out._field_norm(Gv[0])
                res.note(_deg(kk) + 2, amt)
    if max_degree is not None:
        for d, v in out.truncate(max_degree).items():
            res.note(d, v)
    return res


def poisson_with_D2(term: PolyHam, D2: D2Data, max_degree: Optional[int] = None) -> BracketResult:
    """{D2, term}.

    Scalars:  {D2, a z^mu zbar^nu} = i lambda(rho).(mu-nu) a z^mu zbar^nu.
    Vectors:  {D2, z^mu zbar^nu <s1 s3 G, f>} = z^mu zbar^nu <s1 s3 (i lambda.(mu-nu) G - i H G), f>
              - 2i sum_j lambda'_j |z_j|^2 z^mu zbar^nu <sigma1 f, G>.
    The rho-derivative of scalar coefficients pairs with H f into terms quadratic
    in f; those are dropped and reported.
    """
    out = term.empty_like()
    res = BracketResult(out)
    P = term.P
    for k, a in term.scalars.items():
        x = D2.frequency(k, P)
        out.add_scalar(k, 1j * _rho_mul(x, a))
        da = _rho_derivative(a)
        if np.any(da):
            res.note(_deg(k) + 2, float(np.max(np.abs(da))))
    for k, G in term.vectors.items():
        x = D2.frequency(k, P)
        HG = np.array([D2.apply_H(G[p]) for p in range(P)])
        out.add_vector(k, 1j * _rho_mul(x, G) - 1j * HG)
        s3G = G.copy()
        s3G[:, 1] *= -1
        for j in range(D2.m):
            if D2.lambda_rho[j] == 0:
                continue
            e = tuple(int(i == j) for i in range(D2.m))
            kk = _add_keys(k, (e, e))
            out.add_vector(kk, -2j * D2.lambda_rho[j] * D2.Pc(s3G))
        if P > 1 and np.any(G[1:]):
            res.note(_deg(k) + 3, out._field_norm(G[1]))
    if max_degree is not None:
        for d, v in out.truncate(max_degree).items():
            res.note(d, v)
    return res


# ---------------------------------------------------------------------------
# Homological equation
# ---------------------------------------------------------------------------

@dataclass
class Chi:
    """Generator of one Birkhoff step (same storage as PolyHam)."""

    terms: PolyHam

    @property
    def norm(self) -> float:
        return self.terms.coefficient_norm()

    def degree(self) -> int:
        degs = [d for *_, d, nrm in self.terms.slices() if nrm > 0]
        return min(degs) if degs else 0

    def symmetry_defect(self) -> float:
        """Generators of real Hamiltonians satisfy b_mn = conj(b_nm), B_mn = -sigma1 conj(B_nm)."""
        return self.terms.reality_defect()


@dataclass
class HomologicalSolution:
    chi: Chi
    L: PolyHam
    residual: float


def solve_homological(K: PolyHam, D2: D2Data, classifier: Optional[NormalFormClassifier] = None,
                      verify: bool = True, gap_tol: float = 1e-6,
                      solve_tol: float = 1e-8) -> HomologicalSolution:
    """Find chi with {chi, D2} = K + L.

    Scalars:  b(rho) = k(rho) / (i lambda(rho).(nu - mu)), expanded in rho.
    Vectors:  i (H - x(rho)) B(rho) = K(rho) with x = lambda(rho).(mu - nu); solved on Ran Pc.
    L collects the terms produced by lambda'(rho) acting on the vector part of chi.
    """
    classifier = classifier or NormalFormClassifier(D2.lambdas, D2.omega0)
    P = K.P
    chi = K.empty_like()
    chi.quad = None
    for k, kc in K.scalars.items():
        if classifier.is_normal("scalar", k):
            raise ContractViolation(f"scalar term {k} is already in normal form")
        x = -D2.frequency(k, P)        # lambda(rho).(nu - mu)
        x0 = x[0]
        if abs(x0) < gap_tol:
            raise SmallDenominator(k, -x0, "null scalar term")
        inv = np.zeros(P, dtype=complex)
        inv[0] = 1.0 / x0
        if P > 1:
            inv[1] = -x[1] / x0**2
        chi.add_scalar(k, _rho_mul(inv, kc) / 1j)
    for k, KG in K.vectors.items():
        if classifier.is_normal("vector", k):
            raise ContractViolation(f"vector term {k} is continuous-resonant")
        x = D2.frequency(k, P)         # lambda(rho).(mu - nu)
        x0 = float(np.real(x[0]))
        if abs(x0) >= D2.omega0 - gap_tol:
            raise SmallDenominator(k, x0, "inside the essential band")
        B = np.zeros_like(KG)
        Y0 = D2.resolve(x0, KG[0])
        B[0] = -1j * Y0
        if P > 1:
            Y1 = D2.resolve(x0, KG[1])
            B[1] = -1j * (Y1 + x[1] * D2.resolve(x0, Y0))
        # the discrete eigenvalues +-lambda_j and 0 belong to Ran Pd; on Ran Pc the
        # solve is regular unless the restricted operator is ill-conditioned
        defect = l2_norm(D2.apply_H(Y0) - x0 * Y0 - KG[0], D2.grid)
        if defect > solve_tol * max(l2_norm(KG[0], D2.grid), 1e-300):
            raise SmallDenominator(k, x0, f"restricted solve residual {defect:.2e}")
        chi.add_vector(k, B)
    # L: lambda'(rho) terms of {chi, D2} = -{D2, chi}
    L = K.empty_like()
    L.quad = None
    for k, B in chi.vectors.items():
        s3B = B.copy()
        s3B[:, 1] *= -1
        for j in range(D2.m):
            if D2.lambda_rho[j] == 0:
                continue
            e = tuple(int(i == j) for i in range(D2.m))
            L.add_vector(_add_keys(k, (e, e)), 2j * D2.lambda_rho[j] * D2.Pc(s3B))
    resid = 0.0
    if verify:
        resid = homological_residual(Chi(chi), K, L, D2)
        if resid > 1e-8 * max(1.0, K.coefficient_norm()):
            logger.warning("homological residual %.3e", resid)
    return HomologicalSolution(Chi(chi), L, resid)


def homological_residual(chi: Chi, K: PolyHam, L: PolyHam, D2: D2Data) -> float:
    """Coefficient norm of {chi, D2} - K - L, computed through poisson_with_D2."""
    br = poisson_with_D2(chi.terms, D2).terms       # {D2, chi}
    diff = br.scaled(-1.0) + K.scaled(-1.0) + L.scaled(-1.0)
    diff.truncate(max_degree=10**6, tol=0.0)
    return diff.coefficient_norm()


# ---------------------------------------------------------------------------
# Hamiltonian expansion about the ground state
# ---------------------------------------------------------------------------

class _FieldPoly:
    """Polynomial in (z, zbar) with pointwise array coefficients."""

    def __init__(self, terms: Optional[Dict[Key, np.ndarray]] = None):
        self.terms = terms or {}

    def __add__(self, other):
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out[k] + v if k in out else v
        return _FieldPoly(out)

    def __mul__(self, other):
        if not isinstance(other, _FieldPoly):
            return _FieldPoly({k: v * other for k, v in self.terms.items()})
        out: Dict[Key, np.ndarray] = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                k = _add_keys(k1, k2)
                out[k] = out[k] + v1 * v2 if k in out else v1 * v2
        return _FieldPoly(out)

    __rmul__ = __mul__

    def power(self, p: int):
        out = self
        for _ in range(p - 1):
            out = out * self
        return out


def _discrete_components(spec: SpectralData):
    """(r1, r2) of D = sum_j z_j xi_j + zbar_j sigma1 xi_j as field polynomials."""
    m = spec.m
    r1, r2 = {}, {}
    zero = tuple([0] * m)
    for j in range(m):
        e = tuple(int(i == j) for i in range(m))
        xi = spec.xis[j].astype(complex)
        r1[(e, zero)] = xi[0]
        r1[(zero, e)] = xi[1]
        r2[(e, zero)] = xi[1]
        r2[(zero, e)] = xi[0]
    return _FieldPoly(r1), _FieldPoly(r2)


def _taylor_densities(phi: np.ndarray, model: Model, order: int, r1, r2):
    """Energy density of order ``order`` in R and its two partial derivatives."""
    s = phi**2
    nl = model.nonlinearity
    if order == 3:
        b1 = nl.dbeta(s) * phi
        b2 = nl.d2beta(s) * phi**3
        u = r1 + r2
        dens = (u * r1 * r2) * b1 + u.power(3) * (b2 / 6.0)
        d1 = (r1 * r2 * 2.0 + r2 * r2) * b1 + (u * u) * (b2 / 2.0)
        d2 = (r1 * r2 * 2.0 + r1 * r1) * b1 + (u * u) * (b2 / 2.0)
        return dens, d1, d2
    if order == 4:
        c1 = nl.dbeta(s)
        c2 = nl.d2beta(s) * s
        c3 = nl.d3beta(s) * s**2
        u = r1 + r2
        p = r1 * r2
        dens = (p * p) * (c1 / 2.0) + (u * u * p) * (c2 / 2.0) + u.power(4) * (c3 / 24.0)
        d1 = (p * r2) * c1 + (u * p * 2.0 + u * u * r2) * (c2 / 2.0) + u.power(3) * (c3 / 6.0)
        d2 = (p * r1) * c1 + (u * p * 2.0 + u * u * r1) * (c2 / 2.0) + u.power(3) * (c3 / 6.0)
        return dens, d1, d2
    raise ValueError("Taylor densities available for orders 3 and 4")


def expand_hamiltonian(gs, spec: SpectralData, model: Model, grid: Optional[Grid] = None,
                       r_max: int = 3, rho_degree: int = 1, Hop: Optional[LinearizedOperator] = None,
                       lambda_rho: Optional[Sequence[float]] = None) -> PolyHam:
    """Taylor expansion of the Hamiltonian about Phi in the coordinates (z, f).

    Scalar terms of degree k in z come from the order-k energy density evaluated
    on the discrete part D; vector terms of degree k-1 come from its gradient
    paired with f.  Orders 3 and (when r_max >= 4) 4 are included at rho = 0.
    """
    from .linearization import assemble
    grid = grid or model.grid
    if spec.m and r_max > 2 * spec.N + 3:
        raise ValueError("r_max exceeds 2N + 3")
    Hop = Hop or assemble(gs, model, grid)
    D2 = D2Data(spec.lambdas, Hop, spec, spec.omega, lambda_rho)
    H0 = PolyHam(spec.m, grid.n, rho_degree, {}, {}, D2, r_max, grid)
    if spec.m == 0 or model.nonlinearity.is_zero:
        return H0
    r1, r2 = _discrete_components(spec)
    w = grid.weights
    for order in (3, 4):
        if order > r_max:
            break
        dens, d1, d2 = _taylor_densities(spec.phi, model, order, r1, r2)
        for k, v in sorted(dens.terms.items()):
            val = complex(np.sum(w * v))
            if abs(val) > 0:
                H0.add_scalar(k, [val])
        for k in sorted(set(d1.terms) | set(d2.terms)):
            g1 = d1.terms.get(k, np.zeros(grid.n))
            g2 = d2.terms.get(k, np.zeros(grid.n))
            # functional <(g1, g2), f>  ->  field sigma3 sigma1 (g1, g2) = (g2, -g1)
            G = spec.Pc(np.stack([g2, -g1]).astype(complex))
            H0.add_vector(k, G)
    return H0


# ---------------------------------------------------------------------------
# Lie transform
# ---------------------------------------------------------------------------

@dataclass
class LieState:
    z: np.ndarray
    f: np.ndarray
    rho: float


def _chi_field(chi: PolyHam, D2: D2Data, z: np.ndarray, f: np.ndarray, rho: float):
    """Right-hand side of the auxiliary system for the flow of chi at time 1."""
    m = chi.m
    grid = chi.grid
    zc = np.conj(z)
    zdot = np.zeros(m, dtype=complex)
    fdot = np.zeros_like(f, dtype=complex)
    drho_chi = 0j
    for k, c in chi.scalars.items():
        mu, nu = k
        coef = _rho_eval(c, rho)
        for j in range(m):
            if nu[j]:
                nu2 = list(nu)
                nu2[j] -= 1
                zdot[j] += -1j * coef * nu[j] * _monomial((mu, tuple(nu2)), z)
        dc = _rho_eval(_rho_derivative(c), rho)
        if dc != 0:
            drho_chi += dc * _monomial(k, z)
    for k, G in chi.vectors.items():
        mu, nu = k
        Gr = _rho_eval(G, rho)
        val = pairing(s1s3(Gr), f, grid)
        for j in range(m):
            if nu[j]:
                nu2 = list(nu)
                nu2[j] -= 1
                zdot[j] += -1j * nu[j] * _monomial((mu, tuple(nu2)), z) * val
        fdot += -1j * _monomial(k, z) * Gr
        dG = _rho_eval(_rho_derivative(G), rho)
        if np.any(dG):
            drho_chi += _monomial(k, z) * pairing(s1s3(dG), f, grid)
    if drho_chi != 0:
        fdot += -2j * drho_chi * D2.Pc(s3(f))
    rhodot = 2.0 * pairing(s1(f), fdot, grid)
    return zdot, fdot, rhodot


def _rk4_flow(chi: PolyHam, D2: D2Data, z, f, rho, n_steps: int):
    h = 1.0 / n_steps
    for _ in range(n_steps):
        k1 = _chi_field(chi, D2, z, f, rho)
        k2 = _chi_field(chi, D2, z + 0.5 * h * k1[0], f + 0.5 * h * k1[1], rho + 0.5 * h * k1[2])
        k3 = _chi_field(chi, D2, z + 0.5 * h * k2[0], f + 0.5 * h * k2[1], rho + 0.5 * h * k2[2])
        k4 = _chi_field(chi, D2, z + h * k3[0], f + h * k3[1], rho + h * k3[2])
        z = z + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        f = f + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        rho = rho + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return z, f, rho


@dataclass
class LieResult:
    z: np.ndarray
    f: np.ndarray
    rho: float
    n_steps: int
    rho_defect: float


def lie_transform_apply(chi: Chi, state, D2: D2Data, tol: float = 1e-12,
                        max_steps: int = 4096, radius: float = 0.5) -> LieResult:
    """Time-one map of the flow of chi on (z, f), with rho carried as its own variable.

    The step count doubles until two successive results agree to ``tol``
    (relative); exceeding ``max_steps`` signals that the state is too large.
    On exit rho(1) is compared with ||f(1)||_2^2.
    """
    z, f = state
    z = np.atleast_1d(np.asarray(z, complex))
    f = np.asarray(f, complex)
    grid = chi.terms.grid
    size = float(np.linalg.norm(z)) + l2_norm(f, grid)
    if size > radius:
        raise RadiusTooLarge(f"state size {size:.3e} exceeds the configured radius {radius}")
    rho0 = float(np.real(pairing(f, s1(f), grid)))
    terms = chi.terms
    if not terms.scalars and not terms.vectors:
        return LieResult(z.copy(), f.copy(), rho0, 0, 0.0)
    n = 4
    prev = _rk4_flow(terms, D2, z, f, rho0, n)
    while True:
        n *= 2
        if n > max_steps:
            raise RadiusTooLarge("Lie transform step size underflow")
        cur = _rk4_flow(terms, D2, z, f, rho0, n)
        scale = max(size, 1e-300)
        diff = np.linalg.norm(cur[0] - prev[0]) + l2_norm(cur[1] - prev[1], grid)
        prev = cur
        if diff <= tol * scale:
            break
    z1, f1, rho1 = prev
    defect = abs(complex(rho1) - pairing(f1, s1(f1), grid))
    if defect > 1e-9 * max(1.0, abs(rho1)):
        logger.warning("rho constraint drifted by %.3e in the Lie transform", defect)
    return LieResult(z1, f1, float(np.real(rho1)), n, float(defect))


def compose_transforms(chis: Sequence[Chi], state, D2: D2Data, **kw):
    """Apply the generator list in order (the composite Birkhoff map)."""
    z, f = state
    for chi in chis:
        res = lie_transform_apply(chi, (z, f), D2, **kw)
        z, f = res.z, res.f
    return z, f


def near_identity_constant(chi: Chi, state, D2: D2Data, M0: int, s: float = 2.0, **kw) -> float:
    """||z' - z|| / (||chi|| |z|^(M0-1) (|z| + ||f||_{L^{2,-s}}))."""
    z, f = state
    res = lie_transform_apply(chi, state, D2, **kw)
    zn = float(np.linalg.norm(z))
    denom = chi.norm * zn ** (M0 - 1) * (zn + weighted_norm(f, chi.terms.grid, s))
    return float(np.linalg.norm(res.z - np.asarray(z)) / denom) if denom > 0 else 0.0


def symplectic_form(X, Y, grid: Grid) -> complex:
    """Omega0 on (z, f) tangents consistent with the bracket above.

    X and Y are (dz, df); the zbar components are conj(dz) for physical tangents.
    """
    dz1, df1 = X
    dz2, df2 = Y
    zpart = 1j * np.sum(dz1 * np.conj(dz2) - np.conj(dz1) * dz2)
    fpart = 1j * pairing(df1, s3s1(df2), grid)
    return complex(zpart + fpart)


def canonicity_defect(chis: Sequence[Chi], D2: D2Data, state, tangents, h: float = 1e-5) -> float:
    """max |Omega0(DPhi X, DPhi Y) - Omega0(X, Y)| by central finite differences."""
    z, f = state
    grid = D2.grid

    def image(dz, df, t):
        return compose_transforms(chis, (z + t * dz, f + t * df), D2)

    pushed = []
    for dz, df in tangents:
        zp, fp = image(dz, df, h)
        zm, fm = image(dz, df, -h)
        pushed.append(((zp - zm) / (2 * h), (fp - fm) / (2 * h)))
    worst = 0.0
    for a in range(len(tangents)):
        for b in range(a + 1, len(tangents)):
            lhs = symplectic_form(pushed[a], pushed[b], grid)
            rhs = symplectic_form(tangents[a], tangents[b], grid)
            worst = max(worst, abs(lhs - rhs))
    return worst


# ---------------------------------------------------------------------------
# Birkhoff driver
# ---------------------------------------------------------------------------

@dataclass
class DegreeReport:
    degree: int
    counts: Dict[str, int]
    max_norms: Dict[str, float]
    generator_norm: float
    homological_residual: float
    remainder: float
    leftover_nonnormal: float

    def as_dict(self) -> dict:
        return {"degree": self.degree, "counts": self.counts, "max_norms": self.max_norms,
                "generator_norm": self.generator_norm,
                "homological_residual": self.homological_residual,
                "remainder": self.remainder, "leftover_nonnormal": self.leftover_nonnormal}


@dataclass
class BirkhoffResult:
    Z: PolyHam
    chis: List[Chi]
    fgr_inputs: FgrInputs
    reports: List[DegreeReport]
    transformed: PolyHam

    def as_dict(self) -> dict:
        return {"degrees": [r.as_dict() for r in self.reports],
                "fgr_levels": [{"r": lv.r, "alphas": [list(a) for a in lv.alphas],
                                "norms": [l2_norm(G, self.Z.grid) for G in lv.fields]}
                               for lv in self.fgr_inputs.levels]}


def _adjoint_action(H: PolyHam, chi: Chi, D2: D2Data, max_degree: int, with_quadratic: bool):
    """{H, chi}, including {D2, chi} when H carries the quadratic part."""
    res = poisson_bracket(H, chi.terms, D2, max_degree)
    out = res.terms
    dropped = dict(res.dropped)
    if with_quadratic:
        q = poisson_with_D2(chi.terms, D2, max_degree)
        out = out + q.terms
        for d, v in q.dropped.items():
            dropped[d] = dropped.get(d, 0.0) + v
    return out, dropped


def pushforward(H: PolyHam, chi: Chi, D2: D2Data, max_degree: int):
    """H o phi_chi = sum_k ad_chi^k H / k!, truncated at ``max_degree``."""
    total = H.copy()
    term, dropped = _adjoint_action(H, chi, D2, max_degree, with_quadratic=True)
    k = 1
    while term.scalars or term.vectors:
        total = total + term.scaled(1.0 / math.factorial(k))
        k += 1
        nxt, d2 = _adjoint_action(term, chi, D2, max_degree, with_quadratic=False)
        for d, v in d2.items():
            dropped[d] = dropped.get(d, 0.0) + v
        term = nxt
        if k > 50:
            break
    total.quad = H.quad
    return total, dropped


def birkhoff_drive(H0: PolyHam, classifier: Optional[NormalFormClassifier] = None,
                   r_target: Optional[int] = None, tol: float = 1e-10) -> BirkhoffResult:
    """Remove non-normal terms degree by degree up to ``r_target``."""
    D2 = H0.quad
    if D2 is None:
        raise ValueError("H0 needs its quadratic part")
    classifier = classifier or NormalFormClassifier(D2.lambdas, D2.omega0)
    if r_target is None:
        N = int(np.floor(D2.omega0 / D2.lambdas.min())) if D2.m else 0
        r_target = 2 * N + 1
    H = H0.copy()
    H.max_degree = r_target
    dropped0 = H.truncate(r_target)
    chis: List[Chi] = []
    reports: List[DegreeReport] = []
    for d in range(3, r_target + 1):
        def nonnormal(kind, k, p, d=d):
            return (PolyHam.term_degree(k, kind == "vector", p) == d
                    and not classifier.is_normal(kind, k))
        K = H.restrict(nonnormal)
        counts = {classifier.NULL: 0, classifier.OSCILLATORY: 0, classifier.CONTINUOUS: 0}
        norms = {c: 0.0 for c in counts}
        for kind, k, p, deg, nrm in H.slices():
            if deg == d and nrm > 0:
                cls = classifier.classify(k)
                counts[cls] += 1
                norms[cls] = max(norms[cls], nrm)
        remainder = float(dropped0.get(d + 1, 0.0)) if d == r_target else 0.0
        if not K.scalars and not K.vectors:
            reports.append(DegreeReport(d, counts, norms, 0.0, 0.0, remainder, 0.0))
            continue
        sol = solve_homological(K, D2, classifier)
        chi = sol.chi
        chi.terms.grid = H.grid
        H, dropped = pushforward(H, chi, D2, r_target)
        H.truncate(r_target, tol=0.0)
        chis.append(chi)
        left = H.restrict(nonnormal).coefficient_norm()
        if left > tol:
            logger.warning("degree %d: non-normal terms left with norm %.3e", d, left)
        remainder += float(sum(dropped.values()))
        reports.append(DegreeReport(d, counts, norms, chi.norm, sol.residual, remainder, left))
    Z = H.restrict(lambda kind, k, p: classifier.is_normal(kind, k))
    Z.quad = D2
    return BirkhoffResult(Z=Z, chis=chis, fgr_inputs=export_fgr_inputs(Z, D2),
                          reports=reports, transformed=H)


def export_fgr_inputs(Z: PolyHam, D2: D2Data) -> FgrInputs:
    """Vector terms z^alpha <s1 s3 G_alpha0, f> at rho = 0 for the minimal resonances alpha."""
    groups = resonant_multi_indices(D2.lambdas, D2.omega0)
    zero = tuple([0] * D2.m)
    levels = []
    for r, alphas in groups.items():
        fields = []
        for a in alphas:
            G = Z.vectors.get((a, zero))
            fields.append(G[0] if G is not None else np.zeros((2, Z.n), complex))
        levels.append(ResonantLevel(r=r, alphas=list(alphas), fields=np.array(fields)))
    return FgrInputs(omega0=D2.omega0, lambdas=D2.lambdas.copy(), levels=levels)


def effective_frequencies(Z: PolyHam, D2: D2Data, rho: float) -> np.ndarray:
    """lambda_j^(r)(rho) = lambda_j(rho) + rho-dependent coefficient of |z_j|^2 in Z."""
    out = D2.lambdas + D2.lambda_rho * rho
    for j in range(D2.m):
        e = tuple(int(i == j) for i in range(D2.m))
        c = Z.scalars.get((e, e))
        if c is not None:
            out[j] += float(np.real(_rho_eval(c, rho)))
    return out
