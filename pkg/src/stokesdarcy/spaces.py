"""Global finite element spaces on one region mesh.

Three kinds of spaces are provided:

* :class:`ScalarSpace` -- pressures (``CG1``, ``DG0``, ``DG1``) and the
  scalar building blocks of the Stokes velocities;
* :class:`VectorH1Space` -- Stokes velocities (``MINI``, ``TH2``, ``CCR``,
  ``BR``, and the unstable control ``P1``);
* :class:`HdivSpace` -- Darcy velocities (``RT0``, ``RT1``, ``BDM1``, ``BDM2``).

All spaces share one evaluation protocol: ``tabulate(cells, ref_points)``
returns a :class:`Tabulation` with physical values (and gradients or
divergences) of the local basis, and ``cell_dofs`` maps local to global
indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import refelem
from .mesh import GAMMA_D, GAMMA_S, SIGMA, Mesh
from .refelem import quadrature

CHUNK = 4096

STOKES_VELOCITY = {"MINI": "P1b", "TH2": "P2", "CCR": "P2b", "BR": "P1", "P1": "P1"}
PRESSURE = {"CG1": "P1", "DG0": "P0", "DG1": "P1dc"}
DARCY_VELOCITY = {"RT0": ("RT", 0), "RT1": ("RT", 1), "BDM1": ("BDM", 1), "BDM2": ("BDM", 2)}

ROLES = {
    "stokes_velocity": set(STOKES_VELOCITY),
    "stokes_pressure": {"CG1", "DG0", "DG1"},
    "darcy_velocity": set(DARCY_VELOCITY),
    "darcy_pressure": {"DG0", "DG1"},
}


@dataclass(frozen=True)
class ElementPair:
    """One row of the catalog of Stokes/Darcy element combinations."""

    name: str
    stokes_velocity: str
    stokes_pressure: str
    darcy_velocity: str
    darcy_pressure: str
    order: int
    dims: tuple[int, ...] = (2, 3)
    stable: bool = True


PAIRS = {
    p.name: p
    for p in [
        ElementPair("mini-bdm1", "MINI", "CG1", "BDM1", "DG0", 1),
        ElementPair("mini-rt0", "MINI", "CG1", "RT0", "DG0", 1),
        ElementPair("th2-bdm2", "TH2", "CG1", "BDM2", "DG1", 2, (2,)),
        ElementPair("th2-rt1", "TH2", "CG1", "RT1", "DG1", 2),
        ElementPair("ccr-bdm2", "CCR", "DG1", "BDM2", "DG1", 2, (2,)),
        ElementPair("br-bdm1", "BR", "DG0", "BDM1", "DG0", 1),
        ElementPair("br-rt0", "BR", "DG0", "RT0", "DG0", 1),
        ElementPair("p1p1-rt0", "P1", "CG1", "RT0", "DG0", 1, stable=False),
    ]
}


def get_pair(name: str) -> ElementPair:
    try:
        return PAIRS[name]
    except KeyError:
        raise ValueError(f"unknown element pair {name!r}; choose from {sorted(PAIRS)}") from None


@dataclass(frozen=True)
class FeSpaceSpec:
    role: str
    family: str
    region: str
    options: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.family not in ROLES[self.role]:
            raise ValueError(f"family {self.family!r} is not admissible as {self.role}")
        if self.region not in ("S", "D"):
            raise ValueError("region must be 'S' or 'D'")


@dataclass
class Tabulation:
    values: np.ndarray
    grads: np.ndarray | None = None
    div: np.ndarray | None = None


def chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def _edge_ids(mesh: Mesh, pairs: np.ndarray) -> np.ndarray:
    pairs = np.sort(pairs, axis=-1)
    nv = mesh.n_vertices
    keys = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
    return np.searchsorted(keys, pairs[..., 0] * nv + pairs[..., 1])


def _facet_entities(mesh: Mesh, facets: np.ndarray):
    """Vertices and edges lying on the given facets."""
    fv = mesh.facets[facets]
    verts = np.unique(fv)
    if mesh.dim == 2:
        edges = _edge_ids(mesh, fv)
    else:
        pairs = np.concatenate([fv[:, [0, 1]], fv[:, [0, 2]], fv[:, [1, 2]]])
        edges = _edge_ids(mesh, pairs)
    return verts, np.unique(edges)


class _Space:
    mesh: Mesh
    n_dofs: int
    cell_dofs: np.ndarray

    def evaluate(self, coeffs: np.ndarray, cells: np.ndarray, ref_points: np.ndarray) -> Tabulation:
        """Evaluate the finite element function with ``coeffs`` at reference points."""
        tab = self.tabulate(cells, ref_points)
        loc = coeffs[self.cell_dofs[cells]]
        vals = np.einsum("cqb...,cb->cq...", tab.values, loc)
        grads = None if tab.grads is None else np.einsum("cqb...,cb->cq...", tab.grads, loc)
        div = None if tab.div is None else np.einsum("cqb,cb->cq", tab.div, loc)
        return Tabulation(vals, grads, div)

    def integrals(self) -> np.ndarray:
        """Integral of every global basis function over the mesh."""
        deg = 2 * self.poly_degree
        rule = quadrature(self.mesh.dim, deg)
        out = np.zeros(self.n_dofs)
        for cells in chunks(self.mesh.n_cells):
            tab = self.tabulate(cells, rule.points)
            det = self.mesh.affine_maps(cells).det_jacobian
            loc = np.einsum("cqb...,q,c->cb...", tab.values, rule.weights, det)
            if loc.ndim == 3:
                raise TypeError("integrals() is defined for scalar spaces")
            np.add.at(out, self.cell_dofs[cells].ravel(), loc.ravel())
        return out


class ScalarSpace(_Space):
    """Scalar Lagrange-type space, continuous (``P1``, ``P2``, ...) or broken."""

    def __init__(self, mesh: Mesh, family: str):
        self.mesh = mesh
        self.family = family
        self.element = refelem.scalar_element(family, mesh.dim)
        self.poly_degree = self.element.degree
        nv, ne, nc = mesh.n_vertices, len(mesh.edges), mesh.n_cells
        d = mesh.dim
        if family == "P0":
            dofs = np.arange(nc)[:, None]
            n = nc
        elif family == "P1dc":
            dofs = np.arange(nc * (d + 1)).reshape(nc, d + 1)
            n = nc * (d + 1)
        else:
            blocks = [mesh.cells]
            n = nv
            if family in ("P2", "P2b"):
                blocks.append(nv + mesh.cell_edges)
                n += ne
            if family in ("P1b", "P2b"):
                blocks.append(n + np.arange(nc)[:, None])
                n += nc
            dofs = np.hstack(blocks)
        self.cell_dofs = dofs
        self.n_dofs = n
        self.continuous = family not in ("P0", "P1dc")

    def tabulate(self, cells: np.ndarray, ref_points: np.ndarray) -> Tabulation:
        vals, grads = self.element.tabulate(ref_points)
        amap = self.mesh.affine_maps(cells)
        if ref_points.ndim == 2:
            vals = np.broadcast_to(vals, (len(cells),) + vals.shape)
            grads = np.einsum("cij,qbj->cqbi", amap.inverse_transpose, grads)
        else:
            grads = np.einsum("cij,cqbj->cqbi", amap.inverse_transpose, grads)
        return Tabulation(vals, grads)

    def dofs_on_facets(self, facets: np.ndarray) -> np.ndarray:
        """Global DOFs whose entity lies on the given facets (continuous families)."""
        if not self.continuous or len(facets) == 0:
            return np.zeros(0, dtype=np.int64)
        verts, edges = _facet_entities(self.mesh, facets)
        out = [verts]
        if self.family in ("P2", "P2b"):
            out.append(self.mesh.n_vertices + edges)
        return np.concatenate(out)

    def interpolate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Apply the DOF functionals: nodal values, cell means for ``P0``.

        Bubble coefficients match the value at the cell barycenter.
        """
        mesh = self.mesh
        x = np.zeros(self.n_dofs)
        V = mesh.vertices
        if self.family == "P0":
            rule = quadrature(mesh.dim, 4)
            pts = mesh.affine_maps().push(rule.points)
            vals = f(pts.reshape(-1, mesh.dim)).reshape(pts.shape[:2])
            return vals @ rule.weights / refelem.simplex_measure(mesh.dim)
        if self.family == "P1dc":
            vals = f(V[mesh.cells].reshape(-1, mesh.dim))
            return vals.reshape(-1)
        x[: mesh.n_vertices] = f(V)
        if self.family in ("P2", "P2b"):
            mids = 0.5 * (V[mesh.edges[:, 0]] + V[mesh.edges[:, 1]])
            x[mesh.n_vertices: mesh.n_vertices + len(mesh.edges)] = f(mids)
        if self.family in ("P1b", "P2b"):
            bary = np.full((1, mesh.dim), 1.0 / (mesh.dim + 1))
            vals, _ = self.element.tabulate(bary)
            centers = V[mesh.cells].mean(axis=1)
            loc = x[self.cell_dofs[:, :-1]] @ vals[0, :-1]
            x[self.cell_dofs[:, -1]] = (f(centers) - loc) / vals[0, -1]
        return x


class VectorH1Space(_Space):
    """Vector-valued continuous space, ``dim`` copies of a scalar space.

    Global numbering is component-major (``comp * n_scalar + s``).  With
    ``face_bubbles`` (Bernardi-Raugel) one normal face bubble per facet is
    appended; ``sigma_bubbles`` keeps those on the interface free.
    """

    def __init__(self, mesh: Mesh, family: str, sigma_bubbles: bool = False):
        self.mesh = mesh
        self.family = family
        self.scalar = ScalarSpace(mesh, STOKES_VELOCITY[family])
        self.face_bubbles = family == "BR"
        self.sigma_bubbles = sigma_bubbles
        d = mesh.dim
        ns = self.scalar.n_dofs
        blocks = [self.scalar.cell_dofs + c * ns for c in range(d)]
        self.n_dofs = d * ns
        if self.face_bubbles:
            blocks.append(self.n_dofs + mesh.cell_facets)
            self.n_dofs += mesh.n_facets
        self.cell_dofs = np.hstack(blocks)
        self.poly_degree = self.scalar.poly_degree + (d if self.face_bubbles else 0)
        if self.face_bubbles:
            self.poly_degree = max(self.scalar.poly_degree, d)

        gamma = mesh.facets_with_label(GAMMA_S)
        sigma = mesh.facets_with_label(SIGMA)
        ess = np.zeros(self.n_dofs, dtype=bool)
        sig = np.zeros(self.n_dofs, dtype=bool)
        g_s = self.scalar.dofs_on_facets(gamma)
        s_s = self.scalar.dofs_on_facets(sigma)
        for c in range(d):
            ess[g_s + c * ns] = True
            sig[s_s + c * ns] = True
        if self.face_bubbles:
            ess[d * ns + gamma] = True
            if sigma_bubbles:
                sig[d * ns + sigma] = True
            else:
                ess[d * ns + sigma] = True
        self.essential = ess
        self.sigma_dofs = sig & ~ess

    def tabulate(self, cells: np.ndarray, ref_points: np.ndarray) -> Tabulation:
        d = self.mesh.dim
        st = self.scalar.tabulate(cells, ref_points)
        nc, nq, nb = st.values.shape
        nloc = self.cell_dofs.shape[1]
        vals = np.zeros((nc, nq, nloc, d))
        grads = np.zeros((nc, nq, nloc, d, d))
        for c in range(d):
            vals[:, :, c * nb:(c + 1) * nb, c] = st.values
            grads[:, :, c * nb:(c + 1) * nb, c, :] = st.grads
        if self.face_bubbles:
            amap = self.mesh.affine_maps(cells)
            normals = self.mesh.facet_normal[self.mesh.cell_facets[cells]]  # (c, f, d)
            for f in range(d + 1):
                b, db = refelem.facet_bubble(d, f, ref_points)
                if ref_points.ndim == 2:
                    b = np.broadcast_to(b, (nc, nq))
                    dbp = np.einsum("cij,qj->cqi", amap.inverse_transpose, db)
                else:
                    dbp = np.einsum("cij,cqj->cqi", amap.inverse_transpose, db)
                k = d * nb + f
                vals[:, :, k, :] = b[..., None] * normals[:, None, f, :]
                grads[:, :, k, :, :] = normals[:, None, f, :, None] * dbp[:, :, None, :]
        div = np.einsum("cqbii->cqb", grads)
        return Tabulation(vals, grads, div)

    def interpolate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        d = self.mesh.dim
        ns = self.scalar.n_dofs
        x = np.zeros(self.n_dofs)
        for c in range(d):
            x[c * ns:(c + 1) * ns] = self.scalar.interpolate(lambda p, c=c: f(p)[:, c])
        if self.face_bubbles:
            mesh = self.mesh
            V = mesh.vertices
            centers = V[mesh.facets].mean(axis=1)
            lin = np.zeros((mesh.n_facets, d))
            for c in range(d):
                lin[:, c] = x[c * ns + mesh.facets].mean(axis=1)
            bval = (1.0 / d) ** d
            coef = np.einsum("fi,fi->f", f(centers) - lin, mesh.facet_normal) / bval
            if not self.sigma_bubbles:
                coef[mesh.facet_label == SIGMA] = 0.0
            x[d * ns:] = coef
        return x


class HdivSpace(_Space):
    """Raviart-Thomas / Brezzi-Douglas-Marini space with facet-moment DOFs.

    Global facet DOFs are moments of ``u . n_f`` against facet polynomials,
    where ``n_f`` is the mesh facet normal and vertex-associated test
    functions are ordered by global vertex number.  ``cell_signs`` holds the
    per cell orientation factor of each local DOF.
    """

    def __init__(self, mesh: Mesh, family: str):
        self.mesh = mesh
        self.family = family
        fam, k = DARCY_VELOCITY[family]
        d = mesh.dim
        self.element = refelem.hdiv_element(fam, k, d)
        el = self.element
        self.poly_degree = el.poly_degree
        self.degree = k
        nper = len(el.facet_dofs[0])
        nint = len(el.interior_dofs)
        self.dofs_per_facet = nper
        nc = mesh.n_cells
        dofs = np.zeros((nc, el.ndofs), dtype=np.int64)
        signs = np.ones((nc, el.ndofs))

        amap = mesh.affine_maps()
        ref_n = refelem.reference_facet_normals(d)
        out_n = np.einsum("cij,fj->cfi", amap.inverse_transpose, ref_n)
        cf = mesh.cell_facets
        orient = np.sign(np.einsum("cfi,cfi->cf", out_n, mesh.facet_normal[cf]))
        for f, entries in enumerate(el.facet_dofs):
            gf = cf[:, f]
            fverts = mesh.facets[gf]
            for j, (ldof, vertex) in enumerate(entries):
                if vertex < 0:
                    slot = np.full(nc, j)
                else:
                    slot = np.argmax(fverts == mesh.cells[:, vertex][:, None], axis=1)
                dofs[:, ldof] = gf * nper + slot
                signs[:, ldof] = orient[:, f]
        for j, ldof in enumerate(el.interior_dofs):
            dofs[:, ldof] = mesh.n_facets * nper + np.arange(nc) * nint + j
        self.cell_dofs = dofs
        self.cell_signs = signs
        self.n_dofs = mesh.n_facets * nper + nc * nint

        def facet_dofs(facets):
            return (facets[:, None] * nper + np.arange(nper)).ravel()

        self.facet_dof_index = facet_dofs
        self.essential = np.zeros(self.n_dofs, dtype=bool)
        self.essential[facet_dofs(mesh.facets_with_label(GAMMA_D))] = True
        self.sigma_dofs = np.zeros(self.n_dofs, dtype=bool)
        self.sigma_dofs[facet_dofs(mesh.facets_with_label(SIGMA))] = True

    def tabulate(self, cells: np.ndarray, ref_points: np.ndarray) -> Tabulation:
        rv, rd = self.element.tabulate(ref_points)
        amap = self.mesh.affine_maps(cells)
        vals, div = refelem.piola_push(amap, rv, rd)
        s = self.cell_signs[cells]
        return Tabulation(vals * s[:, None, :, None], None, div * s[:, None, :])

    def interpolate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Facet (and interior) moments of ``f`` via the pulled-back field."""
        mesh = self.mesh
        el = self.element
        x = np.zeros(self.n_dofs)
        for cells in chunks(mesh.n_cells):
            amap = mesh.affine_maps(cells)
            pts = amap.push(el.dof_points)
            vals = f(pts.reshape(-1, mesh.dim)).reshape(pts.shape)
            # contravariant pull-back: uhat = det J J^{-1} u
            uhat = np.einsum("cji,cqj->cqi", amap.inverse_transpose, vals) * amap.det_jacobian[:, None, None]
            loc = el.apply_dofs(uhat) * self.cell_signs[cells]
            x[self.cell_dofs[cells]] = loc
        return x


def build_space(mesh: Mesh, spec: FeSpaceSpec):
    """Create the global space described by ``spec`` on ``mesh``."""
    if spec.role == "stokes_velocity":
        if spec.family == "CCR" and mesh.dim != 2:
            raise ValueError("conforming Crouzeix-Raviart is implemented in 2D only")
        return VectorH1Space(mesh, spec.family, sigma_bubbles=spec.options.get("sigma_bubbles", False))
    if spec.role == "darcy_velocity":
        return HdivSpace(mesh, spec.family)
    return ScalarSpace(mesh, PRESSURE[spec.family])


def zero_mean_functional(space: ScalarSpace) -> np.ndarray:
    """Row vector ``m`` with ``m @ x`` equal to the integral of the function ``x``."""
    return space.integrals()


@dataclass
class DiscreteSpaces:
    """The four spaces of a coupled discretization."""

    pair: ElementPair
    stokes_velocity: VectorH1Space
    stokes_pressure: ScalarSpace
    darcy_velocity: HdivSpace
    darcy_pressure: ScalarSpace

    @property
    def stokes_mesh(self) -> Mesh:
        return self.stokes_velocity.mesh

    @property
    def darcy_mesh(self) -> Mesh:
        return self.darcy_velocity.mesh


def build_spaces(pair: ElementPair | str, stokes_mesh: Mesh, darcy_mesh: Mesh, sigma_bubbles: bool = False) -> DiscreteSpaces:
    if isinstance(pair, str):
        pair = get_pair(pair)
    if stokes_mesh.dim not in pair.dims:
        raise ValueError(f"pair {pair.name} is not available in {stokes_mesh.dim}D")
    vs = build_space(stokes_mesh, FeSpaceSpec("stokes_velocity", pair.stokes_velocity, "S", {"sigma_bubbles": sigma_bubbles}))
    ps = build_space(stokes_mesh, FeSpaceSpec("stokes_pressure", pair.stokes_pressure, "S"))
    vd = build_space(darcy_mesh, FeSpaceSpec("darcy_velocity", pair.darcy_velocity, "D"))
    pd = build_space(darcy_mesh, FeSpaceSpec("darcy_pressure", pair.darcy_pressure, "D"))
    return DiscreteSpaces(pair, vs, ps, vd, pd)


def facet_rule(mesh: Mesh, facets: np.ndarray, degree: int):
    """Quadrature on mesh facets: physical points ``(f, q, dim)`` and weights ``(f, q)``."""
    rule = quadrature(mesh.dim - 1, degree)
    V = mesh.vertices[mesh.facets[facets]]
    pts = V[:, :1] + np.einsum("qk,fkd->fqd", rule.points, V[:, 1:] - V[:, :1])
    w = np.outer(mesh.facet_measure[facets] / refelem.simplex_measure(mesh.dim - 1), rule.weights)
    return pts, w
