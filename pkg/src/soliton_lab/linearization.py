"""Linearized operator at a ground state, its discrete spectrum and projections.

For the real ground state pair Phi = (phi, phi) the linearization is

    H = sigma3 (-Delta + V + omega) + sigma3 [beta + beta' phi^2] - i sigma2 beta' phi^2

which in components reads H = [[A, c], [-c, -A]] with
A = -Delta + V + omega + beta(phi^2) + beta'(phi^2) phi^2 and c = beta'(phi^2) phi^2.
It satisfies H^T = sigma3 H sigma3 (with respect to the bilinear pairing) and
sigma1 H sigma1 = -H.  Its generalized kernel is spanned by sigma3 Phi and
d_omega Phi with H sigma3 Phi = 0 and H d_omega Phi = -sigma3 Phi.

Eigenvalues are obtained from the real symmetric matrix S L+ S with
S = L-^{1/2}, whose eigenvalues are lambda^2.  For xi = (a, b) write
u = a + b, v = a - b; then L+ u = lambda v and L- v = lambda u.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid_model import Grid, Model, pairing, s1, s3, s1s3
from .ground_state import (GroundState, l_minus_diag, l_plus_diag, second_frequency_derivative,
                           solve_ground_state)

logger = logging.getLogger(__name__)


class DegenerateFamily(ValueError):
    """q'(omega) vanishes, so the kernel pair cannot be normalized."""


class SignatureError(RuntimeError):
    """Gram matrix of an eigenvalue cluster is not positive definite."""


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LinearizedOperator:
    """H_omega as a matrix-free operator with optional dense/sparse assembly."""

    omega: float
    grid: Grid
    A_diag: np.ndarray
    c: np.ndarray
    absorber: Optional[np.ndarray] = None

    def apply(self, X: np.ndarray) -> np.ndarray:
        """H X for a (2, n) field (or a stack (..., 2, n))."""
        X = np.asarray(X)
        lap = self.grid.laplacian
        x1, x2 = X[..., 0, :], X[..., 1, :]
        a1 = -lap(x1) + self.A_diag * x1
        a2 = -lap(x2) + self.A_diag * x2
        out = np.stack([a1 + self.c * x2, -self.c * x1 - a2], axis=-2)
        if self.absorber is not None:
            out = out - 1j * self.absorber * X
        return out

    __call__ = apply

    def matrix(self, sparse: Optional[bool] = None):
        """Assembled 2n x 2n matrix (dense for spectral grids)."""
        grid = self.grid
        sparse = (not grid.is_spectral) if sparse is None else sparse
        A = grid.operator(self.A_diag)
        if sparse:
            A = sp.csr_matrix(A)
            C = sp.diags(self.c)
            M = sp.bmat([[A, C], [-C, -A]]).tocsr()
            if self.absorber is not None:
                M = M - 1j * sp.diags(np.concatenate([self.absorber, self.absorber]))
            return M
        A = A.toarray() if hasattr(A, "toarray") else A
        C = np.diag(self.c)
        M = np.block([[A, C], [-C, -A]])
        if self.absorber is not None:
            M = M.astype(complex)
            M[np.diag_indices(2 * grid.n)] -= 1j * np.concatenate([self.absorber, self.absorber])
        return M

    def with_absorber(self, W: Optional[np.ndarray]) -> "LinearizedOperator":
        return LinearizedOperator(self.omega, self.grid, self.A_diag, self.c, W)

    def adjoint(self) -> "LinearizedOperator":
        """Transpose with respect to the bilinear pairing (sigma3 H sigma3)."""
        return LinearizedOperator(self.omega, self.grid, self.A_diag, -self.c, self.absorber)


def assemble(gs: GroundState, model: Model, grid: Optional[Grid] = None) -> LinearizedOperator:
    grid = grid or model.grid
    s = gs.phi**2
    nl = model.nonlinearity
    A = model.potential + gs.omega + nl.beta(s) + nl.s_dbeta(s)
    return LinearizedOperator(gs.omega, grid, A, nl.s_dbeta(s))


def free_operator(grid: Grid, omega: float, V: Optional[np.ndarray] = None) -> LinearizedOperator:
    """sigma3 (-Delta + V + omega), the beta = 0 linearization."""
    V = np.zeros(grid.n) if V is None else V
    return LinearizedOperator(omega, grid, V + omega, np.zeros(grid.n))


# ---------------------------------------------------------------------------
# Higher Taylor terms of the nonlinearity about Phi
# ---------------------------------------------------------------------------
#
# With R = (r1, r2) and s = (phi + r1)(phi + r2) the nonlinear energy density
# B(s) contributes, at third order in R,
#     K3(R) = int beta'(phi^2) phi (r1 + r2) r1 r2 + (1/6) beta''(phi^2) phi^3 (r1 + r2)^3.
# The matching term of the vector field i R_t = H R + ... is sigma3 sigma1 grad K3(R).

def _third_order_coefficients(phi: np.ndarray, model: Model):
    s = phi**2
    nl = model.nonlinearity
    return nl.dbeta(s) * phi, nl.d2beta(s) * phi**3


def quadratic_field(X: np.ndarray, Y: np.ndarray, phi: np.ndarray, model: Model) -> np.ndarray:
    """Symmetric bilinear part Q(X, Y) of the nonlinear vector field about Phi.

    Q(R, R) = sigma3 sigma1 grad K3(R), so that i R_t = H R + Q(R, R) + O(R^3).
    """
    b1, b2 = _third_order_coefficients(phi, model)
    guu = b2 + 2.0 * b1
    gvv = b2
    x1, x2 = X[0], X[1]
    y1, y2 = Y[0], Y[1]
    mixed = 0.5 * guu * (x1 * y2 + x2 * y1)
    first = 0.5 * guu * x1 * y1 + mixed + 0.5 * gvv * x2 * y2
    second = -(0.5 * guu * x2 * y2 + mixed + 0.5 * gvv * x1 * y1)
    return np.stack([first, second])


def cubic_form(X: np.ndarray, Y: np.ndarray, Z: np.ndarray, phi: np.ndarray, model: Model,
               grid: Optional[Grid] = None) -> complex:
    """Symmetric trilinear form T with K3(R) = T(R, R, R)."""
    grid = grid or model.grid
    b1, b2 = _third_order_coefficients(phi, model)
    x1, x2 = X[0], X[1]
    y1, y2 = Y[0], Y[1]
    z1, z2 = Z[0], Z[1]
    mixed = (x1 * y1 * z2 + x1 * y2 * z1 + x2 * y1 * z1
             + x1 * y2 * z2 + x2 * y1 * z2 + x2 * y2 * z1)
    density = b1 * mixed / 3.0 + b2 * (x1 + x2) * (y1 + y2) * (z1 + z2) / 6.0
    return complex(np.sum(grid.weights * density))


# ---------------------------------------------------------------------------
# Spectral data
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SpectralData:
    omega: float
    grid: Grid
    lambdas: np.ndarray
    xis: np.ndarray            # (m, 2, n) real
    Phi: np.ndarray            # (2, n)
    dPhi: np.ndarray           # (2, n)
    qprime: float
    phi: np.ndarray
    N_js: np.ndarray
    threshold_flag: bool = False
    unstable_eigs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clusters: List[List[int]] = field(default_factory=list)
    d2Phi: Optional[np.ndarray] = None
    dxis: Optional[np.ndarray] = None      # (m, 2, n) omega-derivatives of xi_j
    dlambdas: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return len(self.lambdas)

    @property
    def N(self) -> int:
        return int(self.N_js[0]) if self.m else 0

    @property
    def kernel_pair(self):
        return s3(self.Phi), self.dPhi

    # basis of the discrete subspace and its dual (with respect to <.,.>)
    @property
    def basis(self) -> np.ndarray:
        vecs = [s3(self.Phi), self.dPhi]
        vecs += [x.astype(complex) for x in self.xis]
        vecs += [s1(x).astype(complex) for x in self.xis]
        return np.array(vecs)

    @property
    def dual(self) -> np.ndarray:
        if abs(self.qprime) < 1e-12:
            raise DegenerateFamily("q'(omega) vanishes; the generalized kernel is degenerate")
        vecs = [s3(self.dPhi) / self.qprime, self.Phi / self.qprime]
        vecs += [s3(x).astype(complex) for x in self.xis]
        vecs += [s1s3(x) for x in self.xis]
        return np.array(vecs)

    @property
    def qsecond(self) -> float:
        """d q'/d omega = <dPhi, dPhi> + <Phi, d2Phi>."""
        self._need_derivatives()
        return float(np.real(pairing(self.dPhi, self.dPhi, self.grid)
                             + pairing(self.Phi, self.d2Phi, self.grid)))

    def _need_derivatives(self):
        if self.d2Phi is None or (self.m and self.dxis is None):
            raise ValueError("omega-derivatives unavailable; build the data through SpectralFamily")

    @property
    def basis_derivative(self) -> np.ndarray:
        self._need_derivatives()
        vecs = [s3(self.dPhi), self.d2Phi]
        vecs += [x.astype(complex) for x in self.dxis]
        vecs += [s1(x).astype(complex) for x in self.dxis]
        return np.array(vecs)

    @property
    def dual_derivative(self) -> np.ndarray:
        self._need_derivatives()
        qp, qs = self.qprime, self.qsecond
        vecs = [s3(self.d2Phi) / qp - s3(self.dPhi) * qs / qp**2,
                self.dPhi / qp - self.Phi * qs / qp**2]
        vecs += [s3(x).astype(complex) for x in self.dxis]
        vecs += [s1s3(x) for x in self.dxis]
        return np.array(vecs)

    def Pd(self, X: np.ndarray) -> np.ndarray:
        coef = np.array([pairing(d, X, self.grid) for d in self.dual])
        return np.tensordot(coef, self.basis, axes=(0, 0))

    def dPc(self, X: np.ndarray) -> np.ndarray:
        """(d/d omega Pc) X = -(d/d omega Pd) X."""
        B, D = self.basis, self.dual
        dB, dD = self.basis_derivative, self.dual_derivative
        c = np.array([pairing(d, X, self.grid) for d in D])
        dc = np.array([pairing(d, X, self.grid) for d in dD])
        return -(np.tensordot(dc, B, axes=(0, 0)) + np.tensordot(c, dB, axes=(0, 0)))

    def Pc(self, X: np.ndarray) -> np.ndarray:
        return X - self.Pd(X)

    def Pd_adjoint(self, X: np.ndarray) -> np.ndarray:
        coef = np.array([pairing(b, X, self.grid) for b in self.basis])
        return np.tensordot(coef, self.dual, axes=(0, 0))

    def Pc_adjoint(self, X: np.ndarray) -> np.ndarray:
        """Transpose of Pc for the bilinear pairing; equals sigma3 Pc sigma3."""
        return X - self.Pd_adjoint(X)

    def biorthogonality(self) -> np.ndarray:
        """Matrix <sigma3 xi_j, xi_l>."""
        m = self.m
        G = np.zeros((m, m))
        for j in range(m):
            for l in range(m):
                G[j, l] = np.real(pairing(s3(self.xis[j]), self.xis[l], self.grid))
        return G


def _sym(grid: Grid, diag: np.ndarray, sector: Optional[np.ndarray]) -> np.ndarray:
    """Symmetric matrix of -Delta + diag conjugated by sqrt(w), restricted to a sector."""
    A = grid.operator(diag)
    A = A.toarray() if hasattr(A, "toarray") else np.array(A)
    sq = grid.symmetrizer()
    A = sq[:, None] * A / sq[None, :]
    A = 0.5 * (A + A.T)
    if sector is not None:
        A = sector.T @ A @ sector
    return A


def _sectors(model: Model, parity: Optional[str]):
    """Orthonormal sector bases (in symmetrized coordinates)."""
    grid = model.grid
    if grid.kind != "line1d":
        return [None]
    if parity == "even":
        return [grid.even_basis]
    if parity == "full":
        return [None]
    if model.is_even:
        E = grid.even_basis
        n = grid.n
        cols = []
        for j in range(n // 2):
            v = np.zeros(n)
            v[j] = 1 / np.sqrt(2.0)
            v[n - 1 - j] = -1 / np.sqrt(2.0)
            cols.append(v)
        O = np.array(cols).T
        if parity is None and not np.any(model.potential):
            return [E]
        return [E, O]
    return [None]


def _reduced_eigs(model: Model, gs: GroundState, sector, mu_max: float, zero_tol: float):
    grid = model.grid
    Lp = _sym(grid, l_plus_diag(gs.phi, model, gs.omega), sector)
    Lm = _sym(grid, l_minus_diag(gs.phi, model, gs.omega), sector)
    ell, Q = np.linalg.eigh(Lm)
    scale = max(1.0, float(np.max(np.abs(ell))))
    unstable_lm = ell < -1e-8 * scale
    S = (Q * np.sqrt(np.clip(ell, 0.0, None))) @ Q.T
    M = S @ Lp @ S
    M = 0.5 * (M + M.T)
    mu, W = np.linalg.eigh(M)
    mscale = max(1.0, float(np.max(np.abs(mu))))
    sel = (mu > zero_tol * mscale) & (mu < mu_max)
    neg = mu[mu < -1e-9 * mscale]
    U = S @ W[:, sel]
    V = Lp @ U
    return mu[sel], U, V, neg, bool(np.any(unstable_lm)), Lp


def discrete_spectrum(Hop: LinearizedOperator, gs: GroundState, model: Model,
                      search_window: Optional[Sequence[float]] = None, *,
                      parity: Optional[str] = None, edge_tol: float = 1e-6,
                      cluster_tol: float = 1e-8, zero_tol: float = 1e-9) -> SpectralData:
    """Eigenvalues of H in the window (default (0, omega)) with real biorthonormal eigenvectors.

    ``parity`` selects a reflection sector on line grids; by default the even
    sector is used when V vanishes identically (removing translation modes),
    and both sectors are combined when V is even.
    """
    grid = model.grid
    omega = gs.omega
    lo, hi = (0.0, omega) if search_window is None else search_window
    if not (0.0 <= lo < hi <= omega):
        raise ValueError("search window must lie in (0, omega)")
    sq = grid.symmetrizer()
    lams, xis, negs = [], [], []
    threshold = False
    for sector in _sectors(model, parity):
        mu, U, V, neg, _, _ = _reduced_eigs(model, gs, sector, (omega * (1 + 10 * edge_tol)) ** 2,
                                            zero_tol)
        negs.extend(list(neg))
        for k, mk in enumerate(mu):
            lam = float(np.sqrt(mk))
            if abs(lam - omega) <= edge_tol * omega or lam >= omega:
                if abs(lam - omega) <= edge_tol * omega:
                    threshold = True
                continue
            if not (lo < lam < hi):
                continue
            u = U[:, k] if sector is None else sector @ U[:, k]
            v = V[:, k] / lam if sector is None else sector @ (V[:, k] / lam)
            u, v = u / sq, v / sq
            xi = np.stack([0.5 * (u + v), 0.5 * (u - v)])
            lams.append(lam)
            xis.append(xi)
    order = np.argsort(lams)
    lambdas = np.array(lams)[order] if lams else np.zeros(0)
    xis = np.array(xis)[order] if xis else np.zeros((0, 2, grid.n))
    Hreal = Hop if Hop.absorber is None else Hop.with_absorber(None)
    xis = np.array([_refine(Hreal, lam, xi) for lam, xi in zip(lambdas, xis)]) if len(lambdas) else xis
    clusters = _clusters(lambdas, cluster_tol)
    xis = _biorthonormalize(xis, clusters, grid)
    N_js = np.array([int(np.floor(omega / lam)) for lam in lambdas], dtype=int)
    Phi = gs.Phi.real.astype(float)
    dPhi = gs.dPhi.real.astype(float)
    qprime = float(np.real(pairing(Phi, dPhi, grid)))
    sd = SpectralData(omega=omega, grid=grid, lambdas=lambdas, xis=xis,
                      Phi=Phi.astype(complex), dPhi=dPhi.astype(complex), qprime=qprime,
                      phi=gs.phi, N_js=N_js, threshold_flag=threshold,
                      unstable_eigs=np.array(negs), clusters=clusters)
    logger.info("omega=%.6g: %d internal mode(s) %s, threshold flag %s", omega, len(lambdas),
                np.array2string(lambdas, precision=8), threshold)
    return sd


def _refine(Hop: LinearizedOperator, lam: float, xi: np.ndarray, steps: int = 2) -> np.ndarray:
    """Inverse iteration polish of a real eigenvector of H at a fixed eigenvalue."""
    n = Hop.grid.n
    M = Hop.matrix(sparse=False)
    shift = lam * (1 + 1e-10)
    lu = sla.lu_factor(M - shift * np.eye(2 * n))
    x = xi.reshape(-1).astype(float)
    nrm0 = np.linalg.norm(x)
    for _ in range(steps):
        x = sla.lu_solve(lu, x)
        x = x / np.linalg.norm(x) * nrm0
    if np.dot(x, xi.reshape(-1)) < 0:
        x = -x
    return x.reshape(2, n)


def _clusters(lambdas: np.ndarray, tol: float) -> List[List[int]]:
    groups: List[List[int]] = []
    for j, lam in enumerate(lambdas):
        if groups and abs(lam - lambdas[groups[-1][-1]]) <= tol * max(abs(lam), 1.0):
            groups[-1].append(j)
        else:
            groups.append([j])
    return groups


def _biorthonormalize(xis: np.ndarray, clusters, grid: Grid) -> np.ndarray:
    """Gram-Schmidt in the sigma3-pairing inside each cluster (Cholesky form)."""
    out = np.array(xis, dtype=float, copy=True)
    for grp in clusters:
        X = out[grp]
        G = np.array([[np.real(pairing(s3(a), b, grid)) for b in X] for a in X])
        G = 0.5 * (G + G.T)
        try:
            Lc = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise SignatureError(
                f"Gram matrix of cluster {grp} is not positive definite: {np.linalg.eigvalsh(G)}"
            ) from exc
        Y = np.linalg.solve(Lc, X.reshape(len(grp), -1)).reshape(X.shape)
        out[grp] = Y
    return out


def spectral_data(model: Model, omega: float, *, parity: Optional[str] = None,
                  guess: Optional[np.ndarray] = None, window=None,
                  with_second_derivative: bool = False) -> SpectralData:
    """Ground state plus discrete spectrum at one frequency."""
    gs = solve_ground_state(model, model.grid, omega, guess, derivative="solve")
    Hop = assemble(gs, model)
    sd = discrete_spectrum(Hop, gs, model, window, parity=parity)
    if with_second_derivative:
        d2 = second_frequency_derivative(gs, model)
        sd.d2Phi = np.stack([d2, d2]).astype(complex)
    return sd


# ---------------------------------------------------------------------------
# Hypothesis checks and projections
# ---------------------------------------------------------------------------

@dataclass
class SpectralReport:
    lambdas: np.ndarray
    N_js: np.ndarray
    h7: bool
    h8: bool
    h8_min_gap: float
    h8_witness: Optional[tuple]
    h9: bool
    h9_min: float
    h9_witness: Optional[tuple]
    h10: bool
    threshold_flag: bool

    def as_dict(self) -> dict:
        return {
            "lambdas": [float(x) for x in self.lambdas],
            "N_js": [int(x) for x in self.N_js],
            "H7": self.h7, "H8": self.h8, "H8_min_gap": self.h8_min_gap,
            "H8_witness": list(self.h8_witness) if self.h8_witness else None,
            "H9": self.h9, "H9_min": self.h9_min,
            "H9_witness": list(self.h9_witness) if self.h9_witness else None,
            "H10": self.h10, "threshold_flag": self.threshold_flag,
        }


def check_H7_to_H10(spec, omega: float, Nmax: Optional[int] = None,
                    tol: Optional[float] = None) -> SpectralReport:
    """Arithmetic conditions on the internal eigenvalues.

    ``spec`` may be SpectralData or a plain sequence of positive eigenvalues.
    Multi-indices range over Z^m with l1-norm at most 2 N_1 + 3 (or Nmax).
    """
    if isinstance(spec, SpectralData):
        lambdas = np.asarray(spec.lambdas, float)
        threshold = spec.threshold_flag
        unstable = len(spec.unstable_eigs) > 0
    else:
        lambdas = np.asarray(spec, float)
        threshold, unstable = False, False
    tol = 1e-6 * omega if tol is None else tol
    m = len(lambdas)
    N_js = np.array([int(np.floor(omega / lam)) for lam in lambdas], dtype=int)
    h7 = bool(m > 0 and all(0 < lam < omega and not np.isclose(omega / lam, round(omega / lam))
                              for lam in lambdas))
    N1 = int(N_js[0]) if m else 0
    bound = (2 * N1 + 3) if Nmax is None else int(Nmax)
    best8, wit8 = np.inf, None
    best9, wit9 = np.inf, None
    if m:
        rng = range(-bound, bound + 1)
        for mu in itertools.product(rng, repeat=m):
            if sum(abs(k) for k in mu) > bound or not any(mu):
                continue
            val = float(np.dot(mu, lambdas))
            g8 = abs(val - omega)
            if g8 < best8:
                best8, wit8 = g8, tuple(int(k) for k in mu)
            if abs(val) < best9:
                best9, wit9 = abs(val), tuple(int(k) for k in mu)
    h8 = bool(best8 > tol)
    h9 = bool(best9 > tol)
    h10 = bool(not threshold and not unstable)
    return SpectralReport(lambdas=lambdas, N_js=N_js, h7=h7, h8=h8, h8_min_gap=best8,
                          h8_witness=None if h8 else wit8, h9=h9, h9_min=best9,
                          h9_witness=None if h9 else wit9, h10=h10, threshold_flag=threshold)


def project_continuous(spec: SpectralData, U: np.ndarray) -> np.ndarray:
    """Pc U = U - Pd U with the dual basis {sigma3 dPhi/q', Phi/q', sigma3 xi_j, sigma1 sigma3 xi_j}."""
    return spec.Pc(np.asarray(U))


def pc_transfer(pt: SpectralData, pt0: SpectralData, X: np.ndarray) -> np.ndarray:
    """(Pc(omega) Pc(omega0))^{-1} Pc(omega) X.

    Returns the unique f in Ran Pc(omega0) with Pc(omega) f = Pc(omega) X.
    Writing f = Pc(omega) X + sum_k c_k b_k(omega) with b_k spanning Ran Pd(omega),
    the coefficients solve the small system <d_l(omega0), f> = 0.
    """
    g = pt.Pc(X)
    B = pt.basis
    D0 = pt0.dual
    M = np.array([[pairing(d, b, pt.grid) for b in B] for d in D0])
    rhs = -np.array([pairing(d, g, pt.grid) for d in D0])
    c = np.linalg.solve(M, rhs)
    return g + np.tensordot(c, B, axes=(0, 0))


class SpectralFamily:
    """Ground states and internal modes on an interval around omega0.

    Data are computed exactly at Chebyshev nodes and evaluated (with
    omega-derivatives) from the interpolating polynomials, which keeps
    repeated evaluations inside modulation and time stepping cheap.
    """

    def __init__(self, model: Model, omega0: float, half_width: Optional[float] = None,
                 n_nodes: int = 9, parity: Optional[str] = None):
        self.model = model
        self.grid = model.grid
        self.omega0 = float(omega0)
        self.half_width = 0.05 * omega0 if half_width is None else float(half_width)
        self.parity = parity
        self.n_nodes = int(n_nodes)
        k = np.arange(self.n_nodes)
        t_nodes = np.cos(np.pi * (2 * k + 1) / (2 * self.n_nodes))[::-1]
        self.nodes = self.omega0 + self.half_width * t_nodes
        self._build(t_nodes)
        self._cache = {}
        self.reference = self.at(self.omega0)

    def _build(self, t_nodes):
        from numpy.polynomial import chebyshev as C
        order = np.argsort(np.abs(self.nodes - self.omega0))
        phis, dphis, xis, lams = {}, {}, {}, {}
        m = None
        guess = None
        ref_xi = None
        for idx in order:
            om = float(self.nodes[idx])
            gs = solve_ground_state(self.model, self.grid, om, guess, derivative="solve")
            sd = discrete_spectrum(assemble(gs, self.model), gs, self.model, parity=self.parity)
            if m is None:
                m = sd.m
                ref_xi = sd.xis.copy()
            elif sd.m != m:
                raise ValueError(f"number of internal modes changes inside the family window "
                                 f"({m} at omega0, {sd.m} at {om:.6g}); shrink half_width")
            x = sd.xis.copy()
            for j in range(m):
                if np.real(pairing(s3(ref_xi[j]), x[j], self.grid)) < 0:
                    x[j] = -x[j]
            phis[idx], dphis[idx], xis[idx], lams[idx] = gs.phi, gs.dphi, x, sd.lambdas
            guess = gs.phi
            self._threshold = getattr(self, "_threshold", False) or sd.threshold_flag
            self._unstable = sd.unstable_eigs
        self.m = m
        deg = self.n_nodes - 1
        stack = lambda d: np.array([d[i] for i in range(self.n_nodes)])
        self._c_phi = C.chebfit(t_nodes, stack(phis), deg)
        self._c_dphi = C.chebfit(t_nodes, stack(dphis), deg)
        if m:
            X = stack(xis).reshape(self.n_nodes, -1)
            self._c_xi = C.chebfit(t_nodes, X, deg)
            self._c_lam = C.chebfit(t_nodes, stack(lams), deg)
        logger.info("spectral family on [%.6g, %.6g] with %d nodes, m=%d",
                    self.nodes[0], self.nodes[-1], self.n_nodes, m)

    def contains(self, omega: float) -> bool:
        return abs(omega - self.omega0) <= self.half_width * (1 + 1e-12)

    def at(self, omega: float) -> SpectralData:
        from numpy.polynomial import chebyshev as C
        omega = float(omega)
        if omega in self._cache:
            return self._cache[omega]
        if not self.contains(omega):
            raise ValueError(f"omega={omega:.8g} outside the family window "
                             f"[{self.omega0 - self.half_width:.8g}, {self.omega0 + self.half_width:.8g}]")
        t = (omega - self.omega0) / self.half_width
        hw = self.half_width
        n = self.grid.n
        phi = C.chebval(t, self._c_phi)
        dphi = C.chebval(t, self._c_dphi)
        d2phi = C.chebval(t, C.chebder(self._c_dphi)) / hw
        if self.m:
            xis = C.chebval(t, self._c_xi).reshape(self.m, 2, n)
            dxis = C.chebval(t, C.chebder(self._c_xi)).reshape(self.m, 2, n) / hw
            lambdas = np.atleast_1d(C.chebval(t, self._c_lam))
            dlambdas = np.atleast_1d(C.chebval(t, C.chebder(self._c_lam))) / hw
        else:
            xis = dxis = np.zeros((0, 2, n))
            lambdas = dlambdas = np.zeros(0)
        Phi = np.stack([phi, phi]).astype(complex)
        dPhi = np.stack([dphi, dphi]).astype(complex)
        qprime = float(np.real(pairing(Phi, dPhi, self.grid)))
        sd = SpectralData(omega=omega, grid=self.grid, lambdas=lambdas, xis=xis, Phi=Phi,
                          dPhi=dPhi, qprime=qprime, phi=phi,
                          N_js=np.array([int(np.floor(omega / l)) for l in lambdas], dtype=int),
                          threshold_flag=self._threshold, unstable_eigs=self._unstable,
                          clusters=_clusters(lambdas, 1e-8),
                          d2Phi=np.stack([d2phi, d2phi]).astype(complex), dxis=dxis,
                          dlambdas=dlambdas)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[omega] = sd
        return sd

    def q(self, omega: float) -> float:
        from numpy.polynomial import chebyshev as C
        phi = C.chebval((omega - self.omega0) / self.half_width, self._c_phi)
        return float(np.real(self.grid.integrate(phi**2)))

    def omega_of_q(self, qval: float) -> float:
        from scipy.optimize import brentq
        lo, hi = self.omega0 - self.half_width, self.omega0 + self.half_width
        return float(brentq(lambda w: self.q(w) - qval, lo, hi, xtol=1e-14))
