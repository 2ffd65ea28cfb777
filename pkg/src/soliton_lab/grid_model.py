"""Discretization, quadrature, Pauli algebra and the NLS model functionals.

Two ambient geometries are supported:

* ``line1d``: the interval (-L, L) with homogeneous Dirichlet ends.  The
  interior nodes are ``x_j = -L + j h`` (j = 1..n, h = 2L/(n+1)) and the
  weights are ``w_j = h``.
* ``radial3d``: radially symmetric functions on R^3 sampled on the
  cell-centred grid ``r_i = (i + 1/2) h`` (h = L/n) with weights
  ``w_i = 4 pi r_i^2 h``.  The Laplacian acts as ``(1/r) d^2/dr^2 (r u)``; the
  regularity condition u'(0) = 0 becomes an odd reflection of ``r u``.

Fields are stored as ``(2, n)`` complex arrays ``U = (u, ubar)``.  The pairing
used everywhere is *bilinear*:

    <f, g> = sum_i w_i (f_1 g_1 + f_2 g_2)

so that the transpose plays the role of the adjoint, the mass is
``Q(U) = 1/2 <U, sigma1 U>`` and the gradient of a functional F is the pair
``(dF/du, dF/dubar)`` divided by the weights.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, "FieldPair"]


class ConstraintViolation(ValueError):
    """Raised when a field pair fails the reality constraint sigma1 U = conj(U)."""


class GridMismatch(ValueError):
    """Raised when fields sampled on different grids are combined."""


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

_FD_STENCILS = {
    2: np.array([1.0, -2.0, 1.0]),
    4: np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0,
    6: np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0,
}


@dataclass(frozen=True, eq=False)
class Grid:
    """Quadrature grid with a discrete Laplacian.

    Parameters
    ----------
    kind : {"line1d", "radial3d"}
    n : int
        Number of nodes.
    L : float
        Half-width (line1d) or outer radius (radial3d).
    laplacian_order : int or "spectral"
        2, 4 or 6 for banded finite differences, or "spectral" for the
        sine-series Laplacian compatible with the Dirichlet condition.
    """

    kind: str
    n: int
    L: float
    laplacian_order: Union[int, str] = "spectral"

    def __post_init__(self):
        if self.kind not in ("line1d", "radial3d"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.n < 8:
            raise ValueError("grid needs at least 8 nodes")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if self.laplacian_order != "spectral" and self.laplacian_order not in _FD_STENCILS:
            raise ValueError(f"unsupported laplacian_order {self.laplacian_order!r}")

    # -- geometry -----------------------------------------------------------
    @cached_property
    def h(self) -> float:
        if self.kind == "line1d":
            return 2.0 * self.L / (self.n + 1)
        return self.L / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        j = np.arange(self.n, dtype=float)
        if self.kind == "line1d":
            return -self.L + (j + 1.0) * self.h
        return (j + 0.5) * self.h

    @cached_property
    def weights(self) -> np.ndarray:
        if self.kind == "line1d":
            return np.full(self.n, self.h)
        return 4.0 * np.pi * self.nodes**2 * self.h

    @property
    def dim(self) -> int:
        return 1 if self.kind == "line1d" else 3

    @cached_property
    def radius(self) -> np.ndarray:
        """Distance to the origin, |x| on the line and r in the radial case."""
        return np.abs(self.nodes)

    @property
    def is_spectral(self) -> bool:
        return self.laplacian_order == "spectral"

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Wavenumbers of the sine basis diagonalizing the spectral Laplacian."""
        m = np.arange(1, self.n + 1, dtype=float)
        if self.kind == "line1d":
            return m * np.pi / (2.0 * self.L)
        return m * np.pi / self.L

    @property
    def k_max(self) -> float:
        """Largest resolved wavenumber (used for stability bounds)."""
        return float(np.pi / self.h)

    @property
    def momentum_resolution(self) -> float:
        return float(self.wavenumbers[0])

    def _dst(self, a, axis=-1):
        if self.kind == "line1d":
            return sfft.dst(a, type=1, norm="ortho", axis=axis)
        return sfft.dst(a, type=2, norm="ortho", axis=axis)

    def _idst(self, a, axis=-1):
        if self.kind == "line1d":
            return sfft.dst(a, type=1, norm="ortho", axis=axis)
        return sfft.dst(a, type=3, norm="ortho", axis=axis)

    # -- sine transforms used by spectral operators and split-step ----------
    def sine_transform(self, u: np.ndarray) -> np.ndarray:
        """Orthonormal sine transform of node values of ``r u`` (radial) or ``u``."""
        v = u * self.nodes if self.kind == "radial3d" else u
        return self._dst(v)

    def inverse_sine_transform(self, c: np.ndarray) -> np.ndarray:
        v = self._idst(c)
        return v / self.nodes if self.kind == "radial3d" else v

    # -- Laplacian ----------------------------------------------------------
    @cached_property
    def _fd_second_difference(self) -> sp.csr_matrix:
        """Banded second difference for the function vanishing at the boundary.

        line1d: zero Dirichlet extension on both sides.
        radial3d: acts on v = r u, odd reflection across r = 0, zero at r = L.
        """
        c = _FD_STENCILS[self.laplacian_order]
        half = len(c) // 2
        n = self.n
        rows, cols, vals = [], [], []
        for i in range(n):
            for k, ck in enumerate(c):
                j = i + k - half
                if j >= n:
                    continue
                if j < 0:
                    if self.kind == "line1d":
                        continue
                    # ghost node r_{-1-j'} = -r_{j'}: v odd
                    j = -1 - j
                    ck = -ck
                rows.append(i)
                cols.append(j)
                vals.append(ck)
        D = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        D.sum_duplicates()
        return D / self.h**2

    @cached_property
    def laplacian_matrix(self):
        """Discrete Laplacian as a dense array (spectral) or CSR matrix (FD)."""
        if self.is_spectral:
            eye = np.eye(self.n)
            S = self._dst(eye, axis=0)
            if self.kind == "line1d":
                lap = S @ (-(self.wavenumbers**2)[:, None] * S)
            else:
                Sinv = self._idst(eye, axis=0)
                core = Sinv @ (-(self.wavenumbers**2)[:, None] * S)
                r = self.nodes
                lap = core * r[None, :] / r[:, None]
            return lap
        D = self._fd_second_difference
        if self.kind == "line1d":
            return D
        r = self.nodes
        return (sp.diags(1.0 / r) @ D @ sp.diags(r)).tocsr()

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        """Apply the discrete Laplacian along the last axis."""
        if self.is_spectral:
            c = self.sine_transform(u)
            return self.inverse_sine_transform(-(self.wavenumbers**2) * c)
        lap = self.laplacian_matrix
        u = np.asarray(u)
        if u.ndim == 1:
            return lap @ u
        return (lap @ u.reshape(-1, self.n).T).T.reshape(u.shape)

    def operator(self, diag: np.ndarray, lap_coef: float = -1.0):
        """Matrix of ``lap_coef * Laplacian + diag(diag)`` in the grid's storage."""
        lap = self.laplacian_matrix
        if self.is_spectral:
            A = lap_coef * lap
            A = A.copy()
            A[np.diag_indices(self.n)] += diag
            return A
        return (lap_coef * lap + sp.diags(diag)).tocsc()

    def symmetrizer(self) -> np.ndarray:
        """sqrt(w); conjugating by it makes weighted-symmetric operators symmetric."""
        return np.sqrt(self.weights)

    # -- parity (line1d) -----------------------------------------------------
    @cached_property
    def even_basis(self) -> np.ndarray:
        """Orthonormal basis (n x n_even) of reflection-even grid vectors (line1d)."""
        if self.kind != "line1d":
            raise ValueError("parity sectors are defined on line1d grids only")
        n = self.n
        half = n // 2
        cols = []
        for j in range(half):
            v = np.zeros(n)
            v[j] = v[n - 1 - j] = 1.0 / np.sqrt(2.0)
            cols.append(v)
        if n % 2 == 1:
            v = np.zeros(n)
            v[half] = 1.0
            cols.append(v)
        return np.array(cols).T

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.sum(self.weights * values, axis=-1)

    def same_as(self, other: "Grid") -> bool:
        return (
            self.kind == other.kind
            and self.n == other.n
            and np.isclose(self.L, other.L)
            and self.laplacian_order == other.laplacian_order
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "L": self.L,
                "laplacian_order": self.laplacian_order}


def default_grid(kind: str) -> Grid:
    """Default resolutions: n=2048, L=40 on the line; n=1024, L=30 radially."""
    if kind == "line1d":
        return Grid("line1d", 2048, 40.0, "spectral")
    return Grid("radial3d", 1024, 30.0, 4)


def linsolve(A, b):
    """Solve with a dense or sparse operator as stored by :meth:`Grid.operator`."""
    if sp.issparse(A):
        return spla.spsolve(A.tocsc(), b)
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# Pauli matrices and field pairs
# ---------------------------------------------------------------------------

SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA2 = np.array([[0, 1j], [-1j, 0]], dtype=complex)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=complex)


@dataclass(frozen=True)
class PauliSet:
    """The three Pauli matrices with the sign convention sigma2 = [[0, i], [-i, 0]]."""

    sigma1: np.ndarray = field(default_factory=lambda: SIGMA1.copy())
    sigma2: np.ndarray = field(default_factory=lambda: SIGMA2.copy())
    sigma3: np.ndarray = field(default_factory=lambda: SIGMA3.copy())

    @staticmethod
    def apply(matrix: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Apply a 2x2 constant matrix componentwise to a (2, n) field."""
        return np.einsum("ab,b...->a...", matrix, U)


PAULI = PauliSet()


def s1(U: np.ndarray) -> np.ndarray:
    """sigma1 U: swap the two components."""
    return U[::-1].copy()


def s3(U: np.ndarray) -> np.ndarray:
    """sigma3 U: flip the sign of the second component."""
    out = np.array(U, dtype=complex, copy=True)
    out[1] *= -1
    return out


def s3s1(U: np.ndarray) -> np.ndarray:
    """sigma3 sigma1 U = (U_2, -U_1)."""
    return np.stack([U[1], -U[0]]).astype(complex)


def s1s3(U: np.ndarray) -> np.ndarray:
    """sigma1 sigma3 U = (-U_2, U_1)."""
    return np.stack([-U[1], U[0]]).astype(complex)


def gauge(U: np.ndarray, theta: float) -> np.ndarray:
    """exp(i sigma3 theta) U."""
    ph = np.exp(1j * theta)
    return np.stack([ph * U[0], np.conj(ph) * U[1]])


class FieldPair:
    """Two-component lattice field U = (u, ubar).

    ``physical=True`` enforces ``minus == conj(plus)`` at construction.
    """

    __slots__ = ("plus", "minus", "grid")

    def __init__(self, plus, minus=None, grid: Optional[Grid] = None,
                 physical: bool = False, tol: float = 1e-12):
        plus = np.asarray(plus, dtype=complex)
        minus = np.conj(plus) if minus is None else np.asarray(minus, dtype=complex)
        if plus.shape != minus.shape:
            raise ValueError("components must have equal shape")
        self.plus = plus
        self.minus = minus
        self.grid = grid
        if physical and not self.is_physical(tol):
            raise ConstraintViolation("minus component is not the conjugate of plus")

    @classmethod
    def from_u(cls, u, grid: Optional[Grid] = None) -> "FieldPair":
        return cls(u, np.conj(u), grid=grid)

    @classmethod
    def from_array(cls, U: np.ndarray, grid: Optional[Grid] = None) -> "FieldPair":
        return cls(U[0], U[1], grid=grid)

    @property
    def array(self) -> np.ndarray:
        return np.stack([self.plus, self.minus])

    def is_physical(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.plus), initial=0.0)))
        return bool(np.max(np.abs(self.minus - np.conj(self.plus)), initial=0.0) <= tol * scale)

    def __repr__(self):
        return f"FieldPair(n={self.plus.shape[-1]})"


def as_array(U: ArrayLike) -> np.ndarray:
    if isinstance(U, FieldPair):
        return U.array
    return np.asarray(U)


def _check_physical(U: np.ndarray, tol: float = 1e-10):
    scale = max(1.0, float(np.max(np.abs(U[0]), initial=0.0)))
    err = float(np.max(np.abs(U[1] - np.conj(U[0])), initial=0.0))
    if err > tol * scale:
        raise ConstraintViolation(f"reality constraint violated by {err:.3e}")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

class Nonlinearity:
    """Interface: beta(s) with derivatives and the antiderivative B (B(0) = 0)."""

    def beta(self, s):
        raise NotImplementedError

    def dbeta(self, s):
        raise NotImplementedError

    def d2beta(self, s):
        raise NotImplementedError

    def d3beta(self, s):
        raise NotImplementedError

    def B(self, s):
        raise NotImplementedError

    # products that stay finite for fractional powers at s = 0
    def s_dbeta(self, s):
        return s * self.dbeta(s)

    def s2_d2beta(self, s):
        return s * s * self.d2beta(s)

    def s3_d3beta(self, s):
        return s**3 * self.d3beta(s)

    @property
    def is_zero(self) -> bool:
        return False


@dataclass(frozen=True)
class PowerNonlinearity(Nonlinearity):
    """beta(s) = -kappa s**q (focusing for kappa > 0)."""

    kappa: float = 1.0
    q: float = 1.0

    def beta(self, s):
        return -self.kappa * np.power(s, self.q)

    def dbeta(self, s):
        return -self.kappa * self.q * np.power(s, self.q - 1.0)

    def d2beta(self, s):
        return -self.kappa * self.q * (self.q - 1.0) * np.power(s, self.q - 2.0)

    def d3beta(self, s):
        q = self.q
        return -self.kappa * q * (q - 1.0) * (q - 2.0) * np.power(s, q - 3.0)

    def B(self, s):
        return -self.kappa * np.power(s, self.q + 1.0) / (self.q + 1.0)

    def s_dbeta(self, s):
        return self.q * self.beta(s)

    def s2_d2beta(self, s):
        return self.q * (self.q - 1.0) * self.beta(s)

    def s3_d3beta(self, s):
        return self.q * (self.q - 1.0) * (self.q - 2.0) * self.beta(s)

    @property
    def is_zero(self) -> bool:
        return self.kappa == 0.0


class TabulatedNonlinearity(Nonlinearity):
    """Smooth beta given by samples on an s-grid, interpolated by a cubic spline.

    The table must start at s = 0 with beta(0) = 0.  B is the exact
    antiderivative of the spline.  Beyond the table the spline is extrapolated.
    """

    def __init__(self, s_values, beta_values):
        s_values = np.asarray(s_values, dtype=float)
        beta_values = np.asarray(beta_values, dtype=float)
        if s_values[0] != 0.0 or abs(beta_values[0]) > 1e-14:
            raise ValueError("table must start at s=0 with beta(0)=0")
        self._spline = CubicSpline(s_values, beta_values, bc_type="natural")
        self._anti = self._spline.antiderivative()
        self.s_max = float(s_values[-1])

    @classmethod
    def from_function(cls, func: Callable, s_max: float = 10.0, n: int = 4001):
        s = np.linspace(0.0, s_max, n)
        return cls(s, func(s))

    @classmethod
    def from_file(cls, path: str):
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 1])

    def beta(self, s):
        return self._spline(s)

    def dbeta(self, s):
        return self._spline(s, 1)

    def d2beta(self, s):
        return self._spline(s, 2)

    def d3beta(self, s):
        return self._spline(s, 3)

    def B(self, s):
        return self._anti(s)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def gaussian_well(grid: Grid, depth: float, width: float) -> np.ndarray:
    """Attractive well V(r) = -depth * exp(-r^2 / width^2)."""
    return -depth * np.exp(-(grid.radius / width) ** 2)


@dataclass(frozen=True, eq=False)
class Model:
    """Potential and nonlinearity of iu_t = -Delta u + V u + beta(|u|^2) u."""

    grid: Grid
    potential: np.ndarray
    nonlinearity: Nonlinearity
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        V = np.asarray(self.potential, dtype=float)
        if V.shape != (self.grid.n,):
            raise GridMismatch("potential does not match the grid")
        object.__setattr__(self, "potential", V)
        if abs(float(self.nonlinearity.beta(np.array(0.0)))) > 1e-14:
            raise ValueError("beta(0) must vanish")

    @property
    def dimension(self) -> int:
        return self.grid.dim

    @property
    def V(self) -> np.ndarray:
        return self.potential

    def beta(self, s):
        return self.nonlinearity.beta(s)

    def B(self, s):
        return self.nonlinearity.B(s)

    @property
    def is_even(self) -> bool:
        """True when V is reflection symmetric on a line grid."""
        if self.grid.kind != "line1d":
            return False
        return bool(np.allclose(self.potential, self.potential[::-1], atol=1e-14))


def make_model(grid: Grid, kappa: float = 1.0, q: float = 1.0,
               potential: Optional[dict] = None,
               nonlinearity: Optional[Nonlinearity] = None) -> Model:
    """Build a model from the configuration vocabulary."""
    potential = potential or {"type": "none"}
    ptype = potential.get("type", "none")
    if ptype == "none":
        V = np.zeros(grid.n)
    elif ptype == "gaussian_well":
        V = gaussian_well(grid, float(potential["depth"]), float(potential["width"]))
    elif ptype == "table":
        data = np.loadtxt(potential["path"], delimiter=",", ndmin=2)
        V = np.interp(grid.radius, data[:, 0], data[:, 1], right=0.0)
    else:
        raise ValueError(f"unknown potential type {ptype!r}")
    nl = nonlinearity or PowerNonlinearity(kappa=kappa, q=q)
    desc = {"kappa": kappa, "q": q, "potential": dict(potential)}
    return Model(grid=grid, potential=V, nonlinearity=nl, description=desc)


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

def pairing(f: ArrayLike, g: ArrayLike, grid: Grid) -> complex:
    """Bilinear pairing <f, g> = sum_i w_i (f_1 g_1 + f_2 g_2), no conjugation.

    Accepts (2, n) arrays or FieldPairs; also works for stacks (..., 2, n)
    on the first argument.
    """
    if isinstance(f, FieldPair) and f.grid is not None and not f.grid.same_as(grid):
        raise GridMismatch("first argument lives on another grid")
    if isinstance(g, FieldPair) and g.grid is not None and not g.grid.same_as(grid):
        raise GridMismatch("second argument lives on another grid")
    fa, ga = as_array(f), as_array(g)
    if fa.shape[-1] != grid.n or ga.shape[-1] != grid.n:
        raise GridMismatch("field length differs from grid size")
    return np.sum(grid.weights * fa * ga, axis=(-2, -1))


def scalar_pairing(f: np.ndarray, g: np.ndarray, grid: Grid) -> complex:
    """Scalar bilinear pairing  sum_i w_i f_i g_i."""
    return np.sum(grid.weights * f * g, axis=-1)


def mass(U: ArrayLike, grid: Grid) -> float:
    """Q(U) = int u ubar = 1/2 <U, sigma1 U>."""
    Ua = as_array(U)
    return float(np.real(0.5 * pairing(Ua, s1(Ua), grid)))


def energy(U: ArrayLike, model: Model, grid: Optional[Grid] = None,
           check: bool = True) -> float:
    """E(U) = int (|grad u|^2 + V |u|^2) + int B(|u|^2)."""
    grid = grid or model.grid
    Ua = as_array(U)
    if check:
        _check_physical(Ua)
    u = Ua[0]
    s = np.abs(u) ** 2
    kinetic = np.real(np.sum(grid.weights * np.conj(u) * (-grid.laplacian(u))))
    pot = np.sum(grid.weights * model.potential * s)
    nl = np.sum(grid.weights * model.B(s))
    return float(kinetic + pot + nl)


def energy_gradient(U: np.ndarray, model: Model) -> np.ndarray:
    """Gradient (dE/du, dE/dubar) with respect to the bilinear pairing."""
    grid = model.grid
    u, v = U[0], U[1]
    s = u * v
    b = model.beta(s)
    gu = -grid.laplacian(v) + model.potential * v + b * v
    gv = -grid.laplacian(u) + model.potential * u + b * u
    return np.stack([gu, gv])


def weighted_norm(f: np.ndarray, grid: Grid, s: float = 2.0) -> float:
    """Local-decay norm ||(1 + r^2)^(-s/2) f||_2 of a pair or a scalar field."""
    fa = np.asarray(f)
    wgt = (1.0 + grid.radius**2) ** (-s / 2.0)
    return float(np.sqrt(np.sum(grid.weights * np.abs(wgt * fa) ** 2)))


def l2_norm(f: np.ndarray, grid: Grid) -> float:
    """Plain L^2 norm; for pairs this sums both components (||f||_2^2 = <f, sigma1 f>)."""
    return float(np.sqrt(np.sum(grid.weights * np.abs(np.asarray(f)) ** 2)))


def absorber_profile(grid: Grid, strength: float, fraction: float = 0.2) -> np.ndarray:
    """Quadratic absorbing ramp W >= 0 over the outer ``fraction`` of the domain."""
    r = grid.radius
    L = grid.L
    start = (1.0 - fraction) * L
    ramp = np.clip((r - start) / (L - start), 0.0, None)
    return strength * ramp**2


def auto_absorber_strength(k: float, grid: Grid, fraction: float = 0.2) -> float:
    """Ramp height giving an attenuation exponent of about 5 for waves of wavenumber k.

    For a quadratic ramp of width d the WKB amplitude damping on the way in and
    out is exp(-W0 d / (3 k)); W0 = 15 k / d makes it exp(-5) while keeping
    the ramp gentle enough for small reflection.
    """
    width = fraction * grid.L
    return 15.0 * max(float(k), 1e-3) / width


# ---------------------------------------------------------------------------
# Configuration and field files
# ---------------------------------------------------------------------------

def grid_from_config(cfg: dict) -> Grid:
    g = cfg.get("grid", {})
    kind = g.get("kind", "line1d")
    base = default_grid(kind)
    order = g.get("laplacian_order", base.laplacian_order)
    return Grid(kind, int(g.get("n", base.n)), float(g.get("L", base.L)), order)


def model_from_config(cfg: dict, grid: Optional[Grid] = None) -> Model:
    grid = grid or grid_from_config(cfg)
    m = cfg.get("model", {})
    pot = m.get("potential", "none")
    if isinstance(pot, str):
        pot = {"type": pot}
    return make_model(grid, kappa=float(m.get("kappa", 1.0)), q=float(m.get("q", 1.0)),
                      potential=pot)


def load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


_FIELD_MAGIC = b"SLFIELD1"
_KIND_CODES = {"line1d": 1, "radial3d": 3}


def write_field(path: str, values: np.ndarray, grid: Grid) -> None:
    """Flat binary field file.

    Layout (little endian): 8-byte magic ``SLFIELD1``, int64 n, float64 L,
    int64 kind code (1 line1d, 3 radial3d), int64 component count c, then
    c*n float64 values (complex data is stored as interleaved real/imag
    components, counted in c).
    """
    arr = np.asarray(values)
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-2)
    arr = np.ascontiguousarray(arr.reshape(-1, grid.n), dtype="<f8")
    header = np.array([grid.n], dtype="<i8").tobytes() + np.array([grid.L], dtype="<f8").tobytes()
    header += np.array([_KIND_CODES[grid.kind], arr.shape[0]], dtype="<i8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC + header + arr.tobytes())


def read_field(path: str):
    """Inverse of :func:`write_field`; returns (values (c, n), n, L, kind)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _FIELD_MAGIC:
        raise ValueError(f"{path} is not a field file")
    n = int(np.frombuffer(raw[8:16], "<i8")[0])
    L = float(np.frombuffer(raw[16:24], "<f8")[0])
    code, c = (int(x) for x in np.frombuffer(raw[24:40], "<i8"))
    kind = {v: k for k, v in _KIND_CODES.items()}[code]
    vals = np.frombuffer(raw[40:], "<f8").reshape(c, n)
    return vals, n, L, kind


def thread_count(requested: Optional[int] = None) -> int:
    """Worker cap: SOLITON_LAB_THREADS overrides the requested value."""
    env = os.environ.get("SOLITON_LAB_THREADS")
    if env:
        return max(1, int(env))
    return max(1, int(requested or 1))
