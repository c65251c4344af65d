"""Assembly of the coupled Stokes-Darcy saddle point system.

Unknowns in the full ordering are ``[u_S, u_D, p_S, p_D, delta]`` followed by
two multipliers that fix the mean of ``p_S`` and ``p_D``.  With
``b(v, (q, rho)) = (div v, q)_{S u D} + rho <v_S . nu, 1>_Sigma`` the system is

    [ A   -B^T   0  ] [u]     [ F ]
    [-B    0    M^T ] [p]  =  [-G ]
    [ 0    M     0  ] [mu]    [ 0 ]

and essential boundary DOFs and Darcy interface DOFs are eliminated by the
congruence ``K_red = P^T K P``.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .coupling import InterfaceCoupling, build_coupling
from .mesh import Mesh
from .refelem import quadrature
from .spaces import CHUNK, DiscreteSpaces, chunks, facet_rule

THREADS_ENV = "STOKESDARCY_THREADS"
COMPAT_TOL = 1e-6


class CompatibilityWarning(UserWarning):
    """Darcy source and prescribed interface flux do not balance."""


@dataclass
class ProblemCoefficients:
    """Physical coefficients and data.

    ``K`` is a constant ``d x d`` matrix or an array ``(n_cells, d, d)`` on the
    Darcy mesh; ``kappa`` a scalar or one value per Stokes interface facet.
    Data callables take points ``(..., d)``.
    """

    nu: float = 1.0
    kappa: float | np.ndarray = 1.0
    K: np.ndarray | None = None
    f_S: Callable | None = None
    f_D: Callable | None = None
    g_nu: Callable | None = None
    g_t: Callable | None = None

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if np.any(np.asarray(self.kappa) <= 0):
            raise ValueError("BJS coefficient must be positive")

    @classmethod
    def from_exact(cls, exact, homogeneous: bool = False) -> "ProblemCoefficients":
        """Coefficients and data derived from an exact solution."""
        if homogeneous:
            return cls(exact.nu, exact.kappa, exact.K, exact.f_S, None, None, None)
        return cls(exact.nu, exact.kappa, exact.K, exact.f_S, exact.f_D, exact.g_nu, exact.g_t)

    def K_inverse(self, dim: int, n_cells: int) -> np.ndarray:
        K = np.eye(dim) if self.K is None else np.asarray(self.K, dtype=float)
        if K.ndim == 2:
            K = np.broadcast_to(K, (n_cells, dim, dim))
        try:
            np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise ValueError("permeability must be symmetric positive definite") from None
        return np.linalg.inv(K)


# ---------------------------------------------------------------------------
# element loops


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _cell_loop(n_cells: int, kernel: Callable, size: int = CHUNK):
    """Run ``kernel(cells) -> (rows, cols, vals)`` over chunks; results in chunk order."""
    parts = list(chunks(n_cells, size))
    n = _n_threads()
    if n > 1 and len(parts) > 1:
        with ThreadPoolExecutor(n) as pool:
            out = list(pool.map(kernel, parts))
    else:
        out = [kernel(c) for c in parts]
    if not out:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    return tuple(np.concatenate(x) for x in zip(*out))


def _pairs(rows: np.ndarray, cols: np.ndarray, loc: np.ndarray):
    """COO triplets of local matrices ``loc (c, i, j)``."""
    R = np.broadcast_to(rows[:, :, None], loc.shape)
    C = np.broadcast_to(cols[:, None, :], loc.shape)
    return R.ravel(), C.ravel(), loc.ravel()


def _local_gram(U: np.ndarray, V: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_q w[c,q] U[c,q,b,:] . V[c,q,k,:]`` as a batched matrix product."""
    c, q, b = U.shape[:3]
    k = V.shape[2]
    Uw = (U.reshape(c, q, b, -1) * w[:, :, None, None]).transpose(0, 2, 1, 3).reshape(c, b, -1)
    Vr = V.reshape(c, q, k, -1).transpose(0, 2, 1, 3).reshape(c, k, -1)
    return np.matmul(Uw, Vr.transpose(0, 2, 1))


def _coo(triplets, shape) -> sp.csr_matrix:
    r, c, v = triplets
    return sp.coo_matrix((v, (r, c)), shape=shape).tocsr()


def stokes_viscous(space, nu: float, degree: int | None = None) -> sp.csr_matrix:
    """``2 nu (eps(u), eps(v))``."""
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else 2 * space.poly_degree)

    def kernel(cells):
        tab = space.tabulate(cells, rule.points)
        eps = 0.5 * (tab.grads + np.swapaxes(tab.grads, -1, -2))
        det = mesh.affine_maps(cells).det_jacobian
        loc = _local_gram(eps, eps, 2 * nu * np.outer(det, rule.weights))
        dofs = space.cell_dofs[cells]
        return _pairs(dofs, dofs, loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (space.n_dofs, space.n_dofs))


def stokes_bjs(space, nu: float, kappa, degree: int | None = None) -> sp.csr_matrix:
    """``nu/kappa <pi_t u, pi_t v>`` on the Stokes interface facets."""
    mesh = space.mesh
    facets = mesh.sigma_facets()
    n = mesh.interface.normal(mesh.dim)
    proj = np.eye(mesh.dim) - np.outer(n, n)
    pts, w = facet_rule(mesh, facets, degree if degree is not None else 2 * space.poly_degree)
    cells = mesh.facet_cells[facets, 0]
    vals = space.tabulate(cells, mesh.affine_maps(cells).pull(pts)).values
    t = vals @ proj
    coef = nu / np.broadcast_to(np.asarray(kappa, dtype=float), (len(facets),))
    loc = _local_gram(t, t, w * coef[:, None])
    dofs = space.cell_dofs[cells]
    return _coo(_pairs(dofs, dofs, loc), (space.n_dofs, space.n_dofs))


def darcy_mass(space, K_inv: np.ndarray, degree: int | None = None) -> sp.csr_matrix:
    """``(K^-1 u, v)`` on the Darcy mesh."""
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else 2 * space.poly_degree)

    def kernel(cells):
        tab = space.tabulate(cells, rule.points)
        det = mesh.affine_maps(cells).det_jacobian
        KV = np.einsum("cij,cqkj->cqki", K_inv[cells], tab.values)
        loc = _local_gram(tab.values, KV, np.outer(det, rule.weights))
        dofs = space.cell_dofs[cells]
        return _pairs(dofs, dofs, loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (space.n_dofs, space.n_dofs))


def divergence_block(vspace, pspace, degree: int | None = None) -> sp.csr_matrix:
    """``(div v, q)`` with rows for ``q`` and columns for ``v``."""
    mesh = vspace.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else vspace.poly_degree + pspace.poly_degree)

    def kernel(cells):
        tv = vspace.tabulate(cells, rule.points)
        tq = pspace.tabulate(cells, rule.points)
        det = mesh.affine_maps(cells).det_jacobian
        loc = _local_gram(np.ascontiguousarray(tq.values)[..., None], tv.div[..., None], np.outer(det, rule.weights))
        return _pairs(pspace.cell_dofs[cells], vspace.cell_dofs[cells], loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (pspace.n_dofs, vspace.n_dofs))


def interface_flux_row(space, degree: int | None = None) -> np.ndarray:
    """``<v_S . nu, 1>_Sigma`` for every Stokes velocity basis function."""
    mesh = space.mesh
    facets = mesh.sigma_facets()
    n = mesh.interface.normal(mesh.dim)
    pts, w = facet_rule(mesh, facets, degree if degree is not None else space.poly_degree)
    cells = mesh.facet_cells[facets, 0]
    vals = space.tabulate(cells, mesh.affine_maps(cells).pull(pts)).values
    loc = np.einsum("cqbi,i,cq->cb", vals, n, w)
    out = np.zeros(space.n_dofs)
    np.add.at(out, space.cell_dofs[cells].ravel(), loc.ravel())
    return out


def h1_gram(space, degree: int | None = None) -> sp.csr_matrix:
    """Full H1 Gram matrix ``(u, v) + (grad u, grad v)`` of a vector space."""
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else 2 * space.poly_degree)

    def kernel(cells):
        tab = space.tabulate(cells, rule.points)
        det = mesh.affine_maps(cells).det_jacobian
        wd = np.outer(det, rule.weights)
        loc = _local_gram(tab.values, tab.values, wd) + _local_gram(tab.grads, tab.grads, wd)
        dofs = space.cell_dofs[cells]
        return _pairs(dofs, dofs, loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (space.n_dofs, space.n_dofs))


def hdiv_gram(space, degree: int | None = None) -> sp.csr_matrix:
    """H(div) Gram matrix ``(u, v) + (div u, div v)``."""
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else 2 * space.poly_degree)

    def kernel(cells):
        tab = space.tabulate(cells, rule.points)
        det = mesh.affine_maps(cells).det_jacobian
        wd = np.outer(det, rule.weights)
        loc = _local_gram(tab.values, tab.values, wd) + _local_gram(tab.div[..., None], tab.div[..., None], wd)
        dofs = space.cell_dofs[cells]
        return _pairs(dofs, dofs, loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (space.n_dofs, space.n_dofs))


def scalar_mass(space, degree: int | None = None) -> sp.csr_matrix:
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree if degree is not None else 2 * space.poly_degree)

    def kernel(cells):
        tab = space.tabulate(cells, rule.points)
        det = mesh.affine_maps(cells).det_jacobian
        vals = np.ascontiguousarray(tab.values)[..., None]
        loc = _local_gram(vals, vals, np.outer(det, rule.weights))
        dofs = space.cell_dofs[cells]
        return _pairs(dofs, dofs, loc)

    return _coo(_cell_loop(mesh.n_cells, kernel), (space.n_dofs, space.n_dofs))


def load_vector(space, f: Callable, degree: int) -> np.ndarray:
    """``(f, v)`` for scalar or vector spaces."""
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree)
    out = np.zeros(space.n_dofs)
    for cells in chunks(mesh.n_cells):
        amap = mesh.affine_maps(cells)
        x = amap.push(rule.points)
        tab = space.tabulate(cells, rule.points)
        fx = f(x)
        if tab.values.ndim == 4:
            loc = np.einsum("cqbi,cqi,q,c->cb", tab.values, fx, rule.weights, amap.det_jacobian)
        else:
            loc = np.einsum("cqb,cq,q,c->cb", tab.values, fx, rule.weights, amap.det_jacobian)
        np.add.at(out, space.cell_dofs[cells].ravel(), loc.ravel())
    return out


def interface_load(space, g: Callable, degree: int) -> np.ndarray:
    """``<g, v>_Sigma`` on the Stokes interface facets."""
    mesh = space.mesh
    facets = mesh.sigma_facets()
    pts, w = facet_rule(mesh, facets, degree)
    cells = mesh.facet_cells[facets, 0]
    vals = space.tabulate(cells, mesh.affine_maps(cells).pull(pts)).values
    loc = np.einsum("cqbi,cqi,cq->cb", vals, g(pts), w)
    out = np.zeros(space.n_dofs)
    np.add.at(out, space.cell_dofs[cells].ravel(), loc.ravel())
    return out


def integrate(mesh: Mesh, f: Callable, degree: int) -> float:
    rule = quadrature(mesh.dim, degree)
    amap = mesh.affine_maps()
    return float(np.einsum("cq,q,c->", f(amap.push(rule.points)), rule.weights, amap.det_jacobian))


def integrate_sigma(mesh: Mesh, g: Callable, degree: int) -> float:
    pts, w = facet_rule(mesh, mesh.sigma_facets(), degree)
    return float(np.sum(w * g(pts)))


# ---------------------------------------------------------------------------
# blocks


@dataclass
class Blocks:
    A_S: sp.csr_matrix
    A_D: sp.csr_matrix
    B_S: sp.csr_matrix
    B_D: sp.csr_matrix
    flux: np.ndarray
    F_S: np.ndarray
    G_D: np.ndarray


def assemble_a(spaces: DiscreteSpaces, coef: ProblemCoefficients):
    """Velocity blocks ``(A_S, A_D)`` of the bilinear form ``a``."""
    vs, vd = spaces.stokes_velocity, spaces.darcy_velocity
    A_S = stokes_viscous(vs, coef.nu) + stokes_bjs(vs, coef.nu, coef.kappa)
    A_D = darcy_mass(vd, coef.K_inverse(vd.mesh.dim, vd.mesh.n_cells))
    return A_S, A_D


def assemble_b(spaces: DiscreteSpaces):
    """``(B_S, B_D, flux)``: divergence blocks and the ``delta`` row."""
    B_S = divergence_block(spaces.stokes_velocity, spaces.stokes_pressure)
    B_D = divergence_block(spaces.darcy_velocity, spaces.darcy_pressure)
    return B_S, B_D, interface_flux_row(spaces.stokes_velocity)


def check_compatibility(spaces: DiscreteSpaces, coef: ProblemCoefficients, G_D: np.ndarray | None = None,
                        degree: int = 8) -> float:
    """``int f_D + <g_nu, 1>_Sigma``; warns when it exceeds the tolerance.

    When the Darcy load vector ``G_D`` is given its sum is used for the
    source integral (the pressure basis is a partition of unity).
    """
    md = spaces.darcy_mesh
    total = scale = 0.0
    if G_D is not None:
        total += float(G_D.sum())
        scale += float(np.abs(G_D).sum())
    elif coef.f_D is not None:
        total += integrate(md, coef.f_D, degree)
        scale += integrate(md, lambda x: np.abs(coef.f_D(x)), degree)
    if coef.g_nu is not None:
        total += integrate_sigma(md, coef.g_nu, degree)
        scale += integrate_sigma(md, lambda x: np.abs(coef.g_nu(x)), degree)
    # quadrature of smooth data is not exact, so the tolerance scales with the data
    if abs(total) > COMPAT_TOL * max(scale, 1.0):
        warnings.warn(
            f"Darcy source and interface flux are incompatible (imbalance {total:.3e}); "
            "solving with the mean-constrained system", CompatibilityWarning, stacklevel=2)
    return total


def assemble_rhs(spaces: DiscreteSpaces, coef: ProblemCoefficients, degree: int | None = None):
    """Load vectors ``F_S = (f_S, v) + <g_t, v>_Sigma`` and ``G_D = (f_D, q)``."""
    vs, pd = spaces.stokes_velocity, spaces.darcy_pressure
    deg = degree if degree is not None else vs.poly_degree + 6
    F = np.zeros(vs.n_dofs)
    if coef.f_S is not None:
        F += load_vector(vs, coef.f_S, deg)
    if coef.g_t is not None:
        F += interface_load(vs, coef.g_t, deg)
    G = np.zeros(pd.n_dofs)
    if coef.f_D is not None:
        G += load_vector(pd, coef.f_D, pd.poly_degree + 6)
    check_compatibility(spaces, coef, G)
    return F, G


# ---------------------------------------------------------------------------
# global system


@dataclass
class CoupledSystem:
    """Reduced symmetric saddle point system and the data to undo the reduction.

    ``matrix``/``rhs`` act on the reduced unknowns; ``x_full = P @ x + x0``
    gives the full vector, split by ``ranges`` (keys ``u_S``, ``u_D``,
    ``p_S``, ``p_D``, ``delta``, ``mu``).
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    P: sp.csr_matrix
    x0: np.ndarray
    K_full: sp.csr_matrix
    rhs_full: np.ndarray
    ranges: dict
    reduced_ranges: dict
    spaces: DiscreteSpaces
    coupling: InterfaceCoupling
    blocks: Blocks
    coefficients: ProblemCoefficients
    mean_functionals: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_dofs(self) -> int:
        """Unknowns of the discrete problem (reduced system without the two multipliers)."""
        return self.n - 2

    def expand(self, x: np.ndarray) -> np.ndarray:
        return self.P @ x + self.x0

    def split(self, x_full: np.ndarray) -> dict:
        return {k: x_full[s] for k, s in self.ranges.items()}


def _ranges(sizes: list[tuple[str, int]]) -> dict:
    out, start = {}, 0
    for name, n in sizes:
        out[name] = slice(start, start + n)
        start += n
    return out


def finalize(spaces: DiscreteSpaces, blocks: Blocks, coupling: InterfaceCoupling,
             coef: ProblemCoefficients) -> CoupledSystem:
    """Build the full symmetric system, then eliminate BC and interface DOFs."""
    vs, vd, ps, pd = spaces.stokes_velocity, spaces.darcy_velocity, spaces.stokes_pressure, spaces.darcy_pressure
    rg = _ranges([("u_S", vs.n_dofs), ("u_D", vd.n_dofs), ("p_S", ps.n_dofs),
                  ("p_D", pd.n_dofs), ("delta", 1), ("mu", 2)])
    n_full = rg["mu"].stop
    nS, nD = vs.n_dofs, vd.n_dofs

    m_S = ps.integrals()
    m_D = pd.integrals()
    Z = None
    A = sp.block_diag([blocks.A_S, blocks.A_D])
    B = sp.bmat([
        [blocks.B_S, None],
        [None, blocks.B_D],
        [sp.csr_matrix(blocks.flux[None, :]), sp.csr_matrix((1, nD))],
    ])
    M = sp.bmat([
        [sp.csr_matrix(m_S[None, :]), sp.csr_matrix((1, pd.n_dofs)), sp.csr_matrix((1, 1))],
        [sp.csr_matrix((1, ps.n_dofs)), sp.csr_matrix(m_D[None, :]), sp.csr_matrix((1, 1))],
    ])
    K = sp.bmat([[A, -B.T, Z], [-B, None, M.T], [Z, M, sp.csr_matrix((2, 2))]]).tocsr()
    rhs = np.concatenate([blocks.F_S, np.zeros(nD), np.zeros(ps.n_dofs), -blocks.G_D, np.zeros(3)])

    cons = coupling.constraints
    fixed = np.zeros(n_full, dtype=bool)
    fixed[:nS] = vs.essential
    fixed[nS:nS + nD] = vd.essential
    slave = nS + cons.slave
    if np.any(fixed[slave]):
        raise ValueError("interface DOFs overlap essential boundary DOFs")
    fixed[slave] = True
    free = np.flatnonzero(~fixed)
    red = -np.ones(n_full, dtype=np.int64)
    red[free] = np.arange(len(free))

    C = cons.C.tocoo()
    keep = red[C.col] >= 0
    rows = np.concatenate([free, slave[C.row[keep]]])
    cols = np.concatenate([np.arange(len(free)), red[C.col[keep]]])
    vals = np.concatenate([np.ones(len(free)), C.data[keep]])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n_full, len(free)))
    x0 = np.zeros(n_full)
    x0[slave] = cons.g

    PT = P.T.tocsr()
    K_red = (PT @ K @ P).tocsr()
    K_red = 0.5 * (K_red + K_red.T)
    K_red.sum_duplicates()
    rhs_red = PT @ (rhs - K @ x0)

    rr = {}
    for name, s in rg.items():
        idx = red[s]
        idx = idx[idx >= 0]
        rr[name] = slice(int(idx[0]), int(idx[-1]) + 1) if len(idx) else slice(0, 0)
    return CoupledSystem(K_red.tocsr(), rhs_red, P, x0, K, rhs, rg, rr, spaces, coupling, blocks, coef, (m_S, m_D))


def assemble_system(spaces: DiscreteSpaces, coef: ProblemCoefficients) -> CoupledSystem:
    """Full pipeline: interface coupling, blocks, load, elimination."""
    coupling = build_coupling(spaces.stokes_velocity, spaces.darcy_velocity, coef.g_nu)
    A_S, A_D = assemble_a(spaces, coef)
    B_S, B_D, flux = assemble_b(spaces)
    F, G = assemble_rhs(spaces, coef)
    blocks = Blocks(A_S, A_D, B_S, B_D, flux, F, G)
    return finalize(spaces, blocks, coupling, coef)


def dump_system(system: CoupledSystem, path) -> None:
    """Write the reduced matrix and right-hand side as text triplets.

    Format: a header line, ``rows cols nnz``, one ``row col value`` line per
    nonzero (0-based, 17 significant digits), then ``# rhs`` and one value
    per line.
    """
    A = system.matrix.tocoo()
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write("# stokesdarcy-system v1 | sparse triplets (row col value), then rhs\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")
        fh.write("# rhs\n")
        for v in system.rhs:
            fh.write(f"{v:.17g}\n")


def read_system(path) -> tuple[sp.csr_matrix, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    n, m, nnz = map(int, lines[1].split())
    trip = np.array([ln.split() for ln in lines[2:2 + nnz]], dtype=float).reshape(-1, 3)
    A = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(n, m))
    rhs = np.array(lines[3 + nnz:], dtype=float)
    return A, rhs
