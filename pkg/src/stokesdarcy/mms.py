"""Manufactured solutions, derived data and error norms.

Exact fields are sums of separable products of univariate factors
``P(x) sin(w x) + Q(x) cos(w x) + E(x) exp(c x)`` with polynomial
coefficients.  That class is closed under differentiation, so every
derivative needed for the sources is exact; nothing is approximated
numerically.

Conventions (all on the interface, ``nu`` pointing from Stokes to Darcy):

* ``g_nu := (u_D - u_S) . nu``, so that ``u_D . nu = u_S . nu + g_nu``;
* ``g_t := 2 nu eps(u_S) nu - p_S nu + nu/kappa pi_t u_S + p_D nu``,
  entering the Stokes momentum equation as ``+<g_t, v_S>``;
* ``p_D`` has zero mean over the Darcy region (constant ``p_D0``), and the
  Stokes pressure is compared with ``p_h + delta_h`` without any shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from .mesh import Mesh
from .refelem import quadrature
from .spaces import CHUNK, chunks

ZERO = Polynomial([0.0])


def _trim(p: Polynomial) -> Polynomial:
    c = np.trim_zeros(np.asarray(p.coef, dtype=float), "b")
    return Polynomial(c if len(c) else [0.0])


@dataclass(frozen=True)
class Factor:
    """Univariate ``S(x) sin(omega x) + C(x) cos(omega x) + E(x) exp(rate x)``."""

    sin: Polynomial = ZERO
    cos: Polynomial = ZERO
    omega: float = 0.0
    exp: Polynomial = ZERO
    rate: float = 0.0

    @classmethod
    def poly(cls, coef) -> "Factor":
        """Pure polynomial, coefficients in increasing degree."""
        return cls(cos=Polynomial(coef))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        polyval = np.polynomial.polynomial.polyval
        out = polyval(x, self.cos.coef)
        if self.omega != 0.0:
            out = out * np.cos(self.omega * x)
            if np.any(self.sin.coef):
                out = out + polyval(x, self.sin.coef) * np.sin(self.omega * x)
        if np.any(self.exp.coef):
            out = out + polyval(x, self.exp.coef) * np.exp(self.rate * x)
        return out

    def deriv(self) -> "Factor":
        w = self.omega
        return Factor(
            sin=_trim(self.sin.deriv() - w * self.cos),
            cos=_trim(self.cos.deriv() + w * self.sin),
            omega=w,
            exp=_trim(self.exp.deriv() + self.rate * self.exp),
            rate=self.rate,
        )


@dataclass(frozen=True)
class Field:
    """Scalar field: a sum of ``coef * prod_i factor_i(x_i)`` plus a constant."""

    terms: tuple[tuple[float, tuple[Factor, ...]], ...]
    const: float = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], self.const)
        for coef, facs in self.terms:
            val = coef
            for i, f in enumerate(facs):
                val = val * f(x[..., i])
            out = out + val
        return out

    def diff(self, axis: int) -> "Field":
        terms = []
        for coef, facs in self.terms:
            d = facs[axis].deriv()
            if not (np.any(d.sin.coef) or np.any(d.cos.coef) or np.any(d.exp.coef)):
                continue
            terms.append((coef, facs[:axis] + (d,) + facs[axis + 1:]))
        return Field(tuple(terms))

    def __add__(self, other: "Field") -> "Field":
        return Field(self.terms + other.terms, self.const + other.const)

    def __sub__(self, other: "Field") -> "Field":
        return self + other.scale(-1.0)

    def scale(self, s: float) -> "Field":
        return Field(tuple((s * c, f) for c, f in self.terms), s * self.const)

    def shift(self, c: float) -> "Field":
        return Field(self.terms, self.const + c)


def product(coef: float, *factors: Factor) -> Field:
    return Field(((coef, tuple(factors)),))


def _box_quadrature(box, n: int = 24):
    """Tensor Gauss-Legendre rule on an axis-aligned box."""
    x, w = np.polynomial.legendre.leggauss(n)
    pts, wts = [], []
    for lo, hi in box:
        pts.append(lo + (hi - lo) * (x + 1) / 2)
        wts.append(w * (hi - lo) / 2)
    P = np.stack(np.meshgrid(*pts, indexing="ij"), axis=-1).reshape(-1, len(box))
    W = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), axis=-1), axis=-1).ravel()
    return P, W


@dataclass
class ExactSolution:
    """Exact Stokes velocity / pressure and Darcy pressure with derived data.

    ``darcy_box`` and ``stokes_box`` are the subdomains, ``axis``/``split``
    the interface plane (Stokes above).
    """

    name: str
    dim: int
    u_S_fields: tuple[Field, ...]
    p_S_field: Field
    p_D_raw: Field
    darcy_box: tuple[tuple[float, float], ...]
    stokes_box: tuple[tuple[float, float], ...]
    nu: float = 1.0
    kappa: float = 1.0
    K: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_D0: float = 0.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)[: self.dim, : self.dim]
        P, W = _box_quadrature(self.darcy_box)
        vol = np.prod([hi - lo for lo, hi in self.darcy_box])
        self.p_D0 = float(W @ self.p_D_raw(P)) / vol
        d = self.dim
        self.p_D_field = self.p_D_raw.shift(-self.p_D0)
        self.grad_u_fields = [[u.diff(j) for j in range(d)] for u in self.u_S_fields]
        self.grad_pD_fields = [self.p_D_field.diff(j) for j in range(d)]
        self.hess_pD_fields = [[g.diff(j) for j in range(d)] for g in self.grad_pD_fields]
        self.grad_pS_fields = [self.p_S_field.diff(j) for j in range(d)]
        # second derivatives of u for the viscous term
        self.hess_u_fields = [[[g.diff(k) for k in range(d)] for g in row] for row in self.grad_u_fields]

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(self.dim)
        n[self.axis] = -1.0
        return n

    @property
    def axis(self) -> int:
        return self.dim - 1

    # -- primary fields -----------------------------------------------

    def u_S(self, x: np.ndarray) -> np.ndarray:
        return np.stack([u(x) for u in self.u_S_fields], axis=-1)

    def grad_u_S(self, x: np.ndarray) -> np.ndarray:
        """``G[..., i, j] = d u_i / d x_j``."""
        return np.stack([np.stack([g(x) for g in row], axis=-1) for row in self.grad_u_fields], axis=-2)

    def div_u_S(self, x: np.ndarray) -> np.ndarray:
        return sum(self.grad_u_fields[i][i](x) for i in range(self.dim))

    def p_S(self, x: np.ndarray) -> np.ndarray:
        return self.p_S_field(x)

    def p_D(self, x: np.ndarray) -> np.ndarray:
        return self.p_D_field(x)

    def grad_p_D(self, x: np.ndarray) -> np.ndarray:
        return np.stack([g(x) for g in self.grad_pD_fields], axis=-1)

    def u_D(self, x: np.ndarray) -> np.ndarray:
        return -self.grad_p_D(x) @ self.K.T

    def div_u_D(self, x: np.ndarray) -> np.ndarray:
        H = np.stack([np.stack([h(x) for h in row], axis=-1) for row in self.hess_pD_fields], axis=-2)
        return -np.einsum("ij,...ij->...", self.K, H)

    # -- derived data -------------------------------------------------

    def f_S(self, x: np.ndarray) -> np.ndarray:
        """``-div(2 nu eps(u_S)) + grad p_S``."""
        d = self.dim
        out = np.stack([g(x) for g in self.grad_pS_fields], axis=-1)
        H = self.hess_u_fields  # H[i][j][k] = d_k d_j u_i
        for i in range(d):
            visc = sum(H[i][j][j](x) + H[j][i][j](x) for j in range(d))
            out[..., i] -= self.nu * visc
        return out

    def f_D(self, x: np.ndarray) -> np.ndarray:
        return self.div_u_D(x)

    def g_nu(self, x: np.ndarray) -> np.ndarray:
        return (self.u_D(x) - self.u_S(x)) @ self.normal

    def g_t(self, x: np.ndarray) -> np.ndarray:
        n = self.normal
        G = self.grad_u_S(x)
        eps_n = 0.5 * (G + np.swapaxes(G, -1, -2)) @ n
        u = self.u_S(x)
        tang = u - (u @ n)[..., None] * n
        return (2 * self.nu * eps_n + (self.p_D(x) - self.p_S(x))[..., None] * n
                + self.nu / self.kappa * tang)


# ---------------------------------------------------------------------------
# the two solutions


def _a(power: int = 1) -> Factor:
    """``(x (1 - x))**power``."""
    return Factor.poly((Polynomial([0, 1, -1]) ** power).coef)


_b = Factor.poly([1.0, -2.0])


def _mul(*ps) -> Factor:
    out = Polynomial([1.0])
    for p in ps:
        out = out * Polynomial(p)
    return Factor.poly(out.coef)


def paper_solution_3d(K=None, nu: float = 1.0, kappa: float = 1.0) -> ExactSolution:
    """Unit cube split at ``z = 1/2``, Stokes on top.

    ``p_D = a1 sin(2 pi x1) a2 sin(2 pi x2) x3 sin(2 pi x3) - p_D0``,
    ``u_S = a1 a2 a3 (-2 a1 b2 b3, a2 b1 b3, a3 b1 b2)``,
    ``p_S = exp(x1 + x2 + x3)`` with ``a = x(1-x)``, ``b = 1 - 2x``.
    """
    a = [0, 1, -1]
    b = [1, -2]
    a2 = (Polynomial(a) ** 2).coef
    u = (
        product(-2.0, _mul(a2), _mul(a, b), _mul(a, b)),
        product(1.0, _mul(a, b), _mul(a2), _mul(a, b)),
        product(1.0, _mul(a, b), _mul(a, b), _mul(a2)),
    )
    w = 2 * np.pi
    pD = product(1.0, Factor(sin=Polynomial(a), omega=w), Factor(sin=Polynomial(a), omega=w),
                 Factor(sin=Polynomial([0, 1]), omega=w))
    e = Factor(exp=Polynomial([1.0]), rate=1.0)
    pS = product(1.0, e, e, e)
    return ExactSolution(
        "paper_3d", 3, u, pS, pD,
        darcy_box=((0, 1), (0, 1), (0, 0.5)), stokes_box=((0, 1), (0, 1), (0.5, 1)),
        nu=nu, kappa=kappa, K=np.eye(3) if K is None else K,
    )


def desk_solution_2d(K=None, nu: float = 1.0, kappa: float = 1.0) -> ExactSolution:
    """Unit square split at ``y = 1/2``, Stokes on top.

    ``u_S = (d psi/dy, -d psi/dx)`` with ``psi = x^2 (1-x)^2 y^2 (1-y)^2``,
    ``p_S = exp(x + y)``, ``p_D = cos(pi x) cos(2 pi y) + x^2 (1-x)^2 - p_D0``.
    ``psi`` and its gradient vanish on the Stokes outer boundary, and ``p_D``
    has zero normal derivative on the Darcy outer boundary.
    """
    a2 = (Polynomial([0, 1, -1]) ** 2)
    da2 = a2.deriv()
    u = (
        product(1.0, Factor.poly(a2.coef), Factor.poly(da2.coef)),
        product(-1.0, Factor.poly(da2.coef), Factor.poly(a2.coef)),
    )
    pD = (product(1.0, Factor(cos=Polynomial([1.0]), omega=np.pi), Factor(cos=Polynomial([1.0]), omega=2 * np.pi))
          + product(1.0, Factor.poly(a2.coef), Factor.poly([1.0])))
    e = Factor(exp=Polynomial([1.0]), rate=1.0)
    pS = product(1.0, e, e)
    return ExactSolution(
        "desk_2d", 2, u, pS, pD,
        darcy_box=((0, 1), (0, 0.5)), stokes_box=((0, 1), (0.5, 1)),
        nu=nu, kappa=kappa, K=np.eye(2) if K is None else K,
    )


SOLUTIONS: dict[str, Callable[..., ExactSolution]] = {
    "paper_3d": paper_solution_3d,
    "desk_2d": desk_solution_2d,
}


def get_solution(name: str, **kwargs) -> ExactSolution:
    try:
        return SOLUTIONS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown solution {name!r}; choose from {sorted(SOLUTIONS)}") from None


# ---------------------------------------------------------------------------
# errors


@dataclass
class ErrorReport:
    e_uS: float
    e_uD: float
    e_pS: float
    e_pD: float
    h_S: float
    h_D: float
    N: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _integrate_sq(space, coeffs, mesh: Mesh, degree: int, diff: Callable) -> float:
    """``sum_K int_K |diff(tab, x)|^2`` over the mesh, chunked."""
    rule = quadrature(mesh.dim, degree)
    total = 0.0
    for cells in chunks(mesh.n_cells, CHUNK // 2):
        amap = mesh.affine_maps(cells)
        x = amap.push(rule.points)
        tab = space.evaluate(coeffs, cells, rule.points)
        r = diff(tab, x)
        r2 = (r**2).reshape(r.shape[0], r.shape[1], -1).sum(axis=-1)
        total += float(np.einsum("cq,q,c->", r2, rule.weights, amap.det_jacobian))
    return total


def compute_errors(solution, exact: ExactSolution, spaces, degree: int | None = None, n_dofs: int = 0) -> ErrorReport:
    """Errors in the norms of the convergence tables.

    ``solution`` needs attributes ``u_S``, ``u_D``, ``p_S``, ``p_D`` (global
    coefficient vectors) and ``delta``.
    """
    k = max(spaces.stokes_velocity.poly_degree, spaces.darcy_velocity.poly_degree)
    deg = degree if degree is not None else min(2 * k + 4, 20)
    ms, md = spaces.stokes_mesh, spaces.darcy_mesh

    e_uS2 = _integrate_sq(spaces.stokes_velocity, solution.u_S, ms, deg,
                          lambda t, x: exact.u_S(x) - t.values)
    e_uS2 += _integrate_sq(spaces.stokes_velocity, solution.u_S, ms, deg,
                           lambda t, x: exact.grad_u_S(x) - t.grads)
    e_uD2 = _integrate_sq(spaces.darcy_velocity, solution.u_D, md, deg,
                          lambda t, x: exact.u_D(x) - t.values)
    e_uD2 += _integrate_sq(spaces.darcy_velocity, solution.u_D, md, deg,
                           lambda t, x: exact.div_u_D(x) - t.div)
    e_pS2 = _integrate_sq(spaces.stokes_pressure, solution.p_S, ms, deg,
                          lambda t, x: exact.p_S(x) - (t.values + solution.delta))
    e_pD2 = _integrate_sq(spaces.darcy_pressure, solution.p_D, md, deg,
                          lambda t, x: exact.p_D(x) - t.values)
    return ErrorReport(
        float(np.sqrt(e_uS2)), float(np.sqrt(e_uD2)), float(np.sqrt(e_pS2)), float(np.sqrt(e_pD2)),
        ms.h, md.h, int(n_dofs),
    )
