"""Interface trace spaces, the L2(Sigma) projection onto Darcy normal traces,
and the affine constraint that ties Darcy interface DOFs to the Stokes velocity.

The Darcy trace space on each interface facet is ``P_k`` with a nodal
Lagrange basis (centroid for ``k = 0``, facet vertices in ascending global
order for ``k = 1``, endpoints plus midpoint for ``k = 2``).  The discrete
constraint is

    u_D . nu = R (u_S . nu + g_nu)   on Sigma,

with ``R`` the L2(Sigma) projection onto that space.  It is realised by
eliminating the Darcy interface DOFs: ``x_slave = C x_S + g``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import refelem
from .mesh import Mesh, MeshError
from .refelem import quadrature, simplex_measure
from .spaces import HdivSpace, VectorH1Space, facet_rule

AREA_TOL = 1e-12


def _in_plane(mesh: Mesh) -> list[int]:
    return [i for i in range(mesh.dim) if i != mesh.interface.axis]


def _lift(mesh: Mesh, pts2: np.ndarray) -> np.ndarray:
    """Embed in-plane coordinates into the interface plane."""
    out = np.empty(pts2.shape[:-1] + (mesh.dim,))
    out[..., _in_plane(mesh)] = pts2
    out[..., mesh.interface.axis] = mesh.interface.value
    return out


def _facet_barycentric(mesh: Mesh, facets: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates ``(f, q, d)`` of points ``(f, q, dim)`` w.r.t. interface facets."""
    ip = _in_plane(mesh)
    V = mesh.vertices[mesh.facets[facets]][:, :, ip]  # (f, d, d-1)
    d = mesh.dim
    A = np.ones((len(facets), d, d))
    A[:, :-1, :] = np.swapaxes(V, 1, 2)
    rhs = np.ones(points.shape[:2] + (d,))
    rhs[..., :-1] = points[..., ip]
    return np.linalg.solve(A[:, None], rhs[..., None])[..., 0]


@dataclass
class TraceSpace:
    """Piecewise ``P_k`` normal traces on the interface facets of one side.

    ``facets`` are mesh facet indices; coefficient ``i * n_per + j`` belongs
    to node ``j`` of ``facets[i]``.  For the Darcy side ``T`` maps global
    velocity coefficients to trace coefficients.
    """

    side: str
    mesh: Mesh
    degree: int
    facets: np.ndarray
    n_per: int
    T: sp.csr_matrix | None = None

    @property
    def n(self) -> int:
        return len(self.facets) * self.n_per

    def nodes(self) -> np.ndarray:
        """Physical node coordinates ``(f, n_per, dim)``."""
        V = self.mesh.vertices[self.mesh.facets[self.facets]]
        if self.degree == 0:
            return V.mean(axis=1, keepdims=True)
        if self.degree == 1:
            return V
        return np.concatenate([V, 0.5 * (V[:, :1] + V[:, 1:2])], axis=1)

    def eval_basis(self, local_facets: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Basis values ``(f, q, n_per)`` at physical points ``(f, q, dim)`` on the given facets."""
        if self.degree == 0:
            return np.ones(points.shape[:2] + (1,))
        lam = _facet_barycentric(self.mesh, self.facets[local_facets], points)
        if self.degree == 1:
            return lam
        a, b = lam[..., 0], lam[..., 1]
        return np.stack([a * (2 * a - 1), b * (2 * b - 1), 4 * a * b], axis=-1)

    def quadrature(self, degree: int):
        """Facet quadrature: physical points ``(f, q, dim)`` and weights ``(f, q)``."""
        return facet_rule(self.mesh, self.facets, degree)

    def evaluate(self, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Trace function values ``(f, q)`` at points ``(f, q, dim)`` (one row per facet)."""
        idx = np.arange(len(self.facets))
        vals = self.eval_basis(idx, points)
        return np.einsum("fqj,fj->fq", vals, coeffs.reshape(-1, self.n_per))


def trace_degree(space: HdivSpace) -> int:
    return space.element.facet_degree


def darcy_trace_space(space: HdivSpace) -> TraceSpace:
    """Normal-trace space of a Darcy H(div) space, with the DOF-to-trace map ``T``."""
    mesh = space.mesh
    k = trace_degree(space)
    facets = mesh.sigma_facets()
    n_per = space.dofs_per_facet
    tr = TraceSpace("D", mesh, k, facets, n_per)
    if len(facets) == 0:
        raise MeshError("Darcy mesh has no interface facets")
    X = tr.nodes()
    cells = mesh.facet_cells[facets, 0]
    ref = mesh.affine_maps(cells).pull(X)
    vals = space.tabulate(cells, ref).values
    nu = mesh.interface.normal(mesh.dim)
    normal = np.einsum("fjbd,d->fjb", vals, nu)  # (f, node, local dof)
    rows = np.repeat(np.arange(tr.n), space.cell_dofs.shape[1])
    cols = np.repeat(space.cell_dofs[cells], n_per, axis=0).ravel()
    T = sp.csr_matrix((normal.ravel(), (rows, cols)), shape=(tr.n, space.n_dofs))
    T.data[np.abs(T.data) < 1e-13 * max(1.0, np.abs(T.data).max())] = 0.0
    T.eliminate_zeros()
    tr.T = T
    return tr


def stokes_normal_trace(space: VectorH1Space, points: np.ndarray, facets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normal components ``(m, q, b)`` of the Stokes basis at points on Stokes interface facets.

    Returns the values and the global DOF indices ``(m, b)``.
    """
    mesh = space.mesh
    cells = mesh.facet_cells[facets, 0]
    ref = mesh.affine_maps(cells).pull(points)
    vals = space.tabulate(cells, ref).values
    nu = mesh.interface.normal(mesh.dim)
    return np.einsum("cqbd,d->cqb", vals, nu), space.cell_dofs[cells]


def stokes_trace_space(space: VectorH1Space) -> TraceSpace:
    """Facet partition of the Stokes side (basis given by :func:`stokes_normal_trace`)."""
    mesh = space.mesh
    return TraceSpace("S", mesh, space.poly_degree, mesh.sigma_facets(), 0)


# ---------------------------------------------------------------------------
# common refinement of the two interface partitions


@dataclass
class InterfaceIntersection:
    """Pieces of the common refinement: facet pairs and piece simplices ``(m, dim, dim)``."""

    stokes_facets: np.ndarray
    darcy_facets: np.ndarray  # local index into the Darcy trace space facets
    simplices: np.ndarray

    def quadrature(self, degree: int):
        dim = self.simplices.shape[-1]
        rule = quadrature(dim - 1, degree)
        S = self.simplices
        pts = S[:, :1] + np.einsum("qk,mkd->mqd", rule.points, S[:, 1:] - S[:, :1])
        meas, _ = refelem.facet_measure_normal(S)
        w = np.outer(meas / simplex_measure(dim - 1), rule.weights)
        return pts, w


def intersect_interfaces(stokes_mesh: Mesh, darcy_mesh: Mesh, darcy_facets: np.ndarray | None = None) -> InterfaceIntersection:
    """Intersect the interface partitions of both meshes.

    2D: intervals on the interface line.  3D: convex polygon intersections
    of triangles in the interface plane, fan-triangulated.
    """
    fs = stokes_mesh.sigma_facets()
    fd = darcy_mesh.sigma_facets() if darcy_facets is None else darcy_facets
    ip = _in_plane(stokes_mesh)
    if stokes_mesh.dim == 2:
        a = stokes_mesh.vertices[stokes_mesh.facets[fs]][:, :, ip[0]]
        b = darcy_mesh.vertices[darcy_mesh.facets[fd]][:, :, ip[0]]
        a.sort(axis=1)
        b.sort(axis=1)
        cuts = np.unique(np.concatenate([a.ravel(), b.ravel()]))
        lo, hi = cuts[:-1], cuts[1:]
        keep = hi - lo > AREA_TOL * (cuts[-1] - cuts[0])
        lo, hi = lo[keep], hi[keep]
        mid = 0.5 * (lo + hi)
        sa, sb = np.argsort(a[:, 0]), np.argsort(b[:, 0])
        ia = sa[np.searchsorted(a[sa, 0], mid, side="right") - 1]
        ib = sb[np.searchsorted(b[sb, 0], mid, side="right") - 1]
        if np.any(a[ia, 1] < mid) or np.any(b[ib, 1] < mid):
            raise MeshError("interface partitions do not cover the same set")
        simp = _lift(stokes_mesh, np.stack([lo, hi], axis=1)[:, :, None])
        return InterfaceIntersection(fs[ia], ib, simp)

    from shapely import STRtree
    from shapely.geometry import Polygon

    A = stokes_mesh.vertices[stokes_mesh.facets[fs]][:, :, ip]
    B = darcy_mesh.vertices[darcy_mesh.facets[fd]][:, :, ip]
    polys = [Polygon(t) for t in A]
    tree = STRtree(polys)
    out_s, out_d, tris = [], [], []
    covered = np.zeros(len(fd))
    for j, tri in enumerate(B):
        pb = Polygon(tri)
        area_b = pb.area
        for i in sorted(tree.query(pb)):
            piece = polys[i].intersection(pb)
            if piece.area <= AREA_TOL * area_b or piece.geom_type != "Polygon":
                continue
            ring = np.asarray(piece.exterior.coords)[:-1]
            for k in range(1, len(ring) - 1):
                t = np.array([ring[0], ring[k], ring[k + 1]])
                e1, e2 = t[1] - t[0], t[2] - t[0]
                cross = e1[0] * e2[1] - e1[1] * e2[0]
                if abs(cross) * 0.5 <= AREA_TOL * area_b:
                    continue
                out_s.append(fs[i])
                out_d.append(j)
                tris.append(t)
            covered[j] += piece.area
        if abs(covered[j] - area_b) > 1e-10 * area_b:
            raise MeshError("interface partitions do not cover the same set")
    simp = _lift(stokes_mesh, np.array(tris))
    return InterfaceIntersection(np.array(out_s), np.array(out_d), simp)


# ---------------------------------------------------------------------------
# matrices


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    nf, n, _ = blocks.shape
    rows = np.repeat(np.arange(nf * n).reshape(nf, n), n, axis=1).ravel()
    cols = np.tile(np.arange(nf * n).reshape(nf, 1, n), (1, n, 1)).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(nf * n, nf * n))


def _diag_blocks(M: sp.spmatrix, n: int) -> np.ndarray:
    M = M.tocsr()
    nf = M.shape[0] // n
    out = np.zeros((nf, n, n))
    base = np.arange(nf) * n
    for i in range(n):
        for j in range(n):
            out[:, i, j] = np.asarray(M[base + i, base + j]).ravel()
    return out


def interface_mass_blocks(trace: TraceSpace) -> np.ndarray:
    pts, w = trace.quadrature(2 * trace.degree)
    phi = trace.eval_basis(np.arange(len(trace.facets)), pts)
    return np.einsum("fq,fqi,fqj->fij", w, phi, phi)


def assemble_interface_mass(trace: TraceSpace) -> sp.csr_matrix:
    """Gram matrix of the trace basis in L2(Sigma), block diagonal per facet."""
    return _block_diag(interface_mass_blocks(trace))


def assemble_mixed_mass(trace: TraceSpace, stokes_space: VectorH1Space,
                        intersection: InterfaceIntersection | None = None) -> sp.csr_matrix:
    """Matrix with entries ``int_Sigma psi_i (phi_j . nu)`` over the common refinement."""
    if intersection is None:
        intersection = intersect_interfaces(stokes_space.mesh, trace.mesh, trace.facets)
    inter = intersection
    deg = trace.degree + stokes_space.poly_degree
    pts, w = inter.quadrature(deg)
    psi = trace.eval_basis(inter.darcy_facets, pts)  # (m, q, n_per)
    phin, dofs = stokes_normal_trace(stokes_space, pts, inter.stokes_facets)
    loc = np.einsum("mq,mqi,mqb->mib", w, psi, phin)
    rows = inter.darcy_facets[:, None] * trace.n_per + np.arange(trace.n_per)
    R = np.broadcast_to(rows[:, :, None], loc.shape)
    Cc = np.broadcast_to(dofs[:, None, :], loc.shape)
    M = sp.coo_matrix((loc.ravel(), (R.ravel(), Cc.ravel())), shape=(trace.n, stokes_space.n_dofs))
    return M.tocsr()


def trace_moments(trace: TraceSpace, f: Callable[[np.ndarray], np.ndarray], degree: int | None = None) -> np.ndarray:
    """Moments ``<f, psi_i>_Sigma`` of a scalar function given as a callable of points ``(n, dim)``."""
    deg = degree if degree is not None else trace.degree + 8
    pts, w = trace.quadrature(deg)
    psi = trace.eval_basis(np.arange(len(trace.facets)), pts)
    vals = f(pts.reshape(-1, trace.mesh.dim)).reshape(w.shape)
    return np.einsum("fq,fq,fqi->fi", w, vals, psi).ravel()


def project(trace: TraceSpace, f: Callable[[np.ndarray], np.ndarray], degree: int | None = None) -> np.ndarray:
    """Coefficients of the L2(Sigma) projection of ``f`` onto the trace space."""
    blocks = interface_mass_blocks(trace)
    m = trace_moments(trace, f, degree).reshape(-1, trace.n_per)
    return np.linalg.solve(blocks, m[..., None])[..., 0].ravel()


def projection_residual(f: Callable[[np.ndarray], np.ndarray], trace: TraceSpace, degree: int | None = None) -> float:
    """``||f - R f||`` in L2(Sigma), by facet quadrature."""
    deg = degree if degree is not None else 2 * trace.degree + 8
    c = project(trace, f, deg)
    pts, w = trace.quadrature(deg)
    diff = f(pts.reshape(-1, trace.mesh.dim)).reshape(w.shape) - trace.evaluate(c, pts)
    return float(np.sqrt(np.sum(w * diff**2)))


# ---------------------------------------------------------------------------
# constraint


@dataclass
class ConstraintSet:
    """Affine relation ``x_D[slave] = C @ x_S + g``.

    ``slave`` holds Darcy velocity DOF indices, ``C`` has one column per
    Stokes velocity DOF; ``master`` lists the columns that are used.
    """

    slave: np.ndarray
    master: np.ndarray
    C: sp.csr_matrix
    g: np.ndarray

    def apply(self, x_stokes: np.ndarray) -> np.ndarray:
        return self.C @ x_stokes + self.g


def build_constraints(M_DD: sp.spmatrix, M_DS: sp.spmatrix, trace: TraceSpace, darcy_space: HdivSpace,
                      g_moments: np.ndarray | None = None) -> ConstraintSet:
    """Eliminate Darcy interface DOFs: ``C = T^-1 M_DD^-1 M_DS``, ``g = T^-1 M_DD^-1 m_g``.

    Every factor is block diagonal over interface facets, so only small
    facet blocks are inverted.
    """
    n = trace.n_per
    slave = darcy_space.facet_dof_index(trace.facets)
    T = _diag_blocks(trace.T[:, slave], n)
    if np.any(np.abs(np.linalg.det(T)) < 1e-14 * np.abs(T).max(axis=(1, 2)) ** n):
        raise np.linalg.LinAlgError("singular trace block: Darcy interface DOFs do not determine the normal trace")
    rest = np.ones(trace.T.shape[1], dtype=bool)
    rest[slave] = False
    off = trace.T[:, rest]
    if off.nnz and np.abs(off.data).max() > 1e-10 * np.abs(T).max():
        raise ValueError("Darcy normal trace depends on non-interface DOFs")
    Mb = _diag_blocks(M_DD, n)
    W = np.linalg.inv(Mb @ T)  # (M_DD T)^-1 = T^-1 M_DD^-1
    Wm = _block_diag(W)
    C = (Wm @ M_DS).tocsr()
    C.data[np.abs(C.data) < 1e-15 * max(1.0, np.abs(C.data).max(initial=0.0))] = 0.0
    C.eliminate_zeros()
    g = np.zeros(len(slave)) if g_moments is None else Wm @ g_moments
    master = np.unique(C.indices)
    return ConstraintSet(slave, master, C, g)


@dataclass
class InterfaceCoupling:
    """Everything the assembly needs about the interface."""

    trace: TraceSpace
    M_DD: sp.csr_matrix
    M_DS: sp.csr_matrix
    constraints: ConstraintSet
    intersection: InterfaceIntersection


def build_coupling(stokes_space: VectorH1Space, darcy_space: HdivSpace,
                   g_nu: Callable[[np.ndarray], np.ndarray] | None = None) -> InterfaceCoupling:
    trace = darcy_trace_space(darcy_space)
    inter = intersect_interfaces(stokes_space.mesh, darcy_space.mesh, trace.facets)
    M_DD = assemble_interface_mass(trace)
    M_DS = assemble_mixed_mass(trace, stokes_space, inter)
    gm = None if g_nu is None else trace_moments(trace, g_nu)
    cons = build_constraints(M_DD, M_DS, trace, darcy_space, gm)
    return InterfaceCoupling(trace, M_DD, M_DS, cons, inter)
