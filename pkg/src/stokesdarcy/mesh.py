"""Structured simplicial meshes of boxes split by an axis-aligned interface.

Cells are stored positively oriented.  Facets are keyed by their sorted
vertex tuple; ``facet_cells[f]`` holds the adjacent cells (second entry -1
on the boundary).  Facet labels:

* ``INTERIOR``  facet between two cells of the same region
* ``GAMMA_S``   outer boundary of the Stokes region
* ``GAMMA_D``   outer boundary of the Darcy region
* ``SIGMA``     facet on the interface plane

Facet normals are unit vectors: outward on the outer boundary, the
interface normal ``nu`` (pointing from the Stokes into the Darcy region) on
the interface, and oriented by the sorted vertex order elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from pathlib import Path

import numpy as np

from .refelem import AffineMap, facet_measure_normal, local_edges, local_facets

INTERIOR, GAMMA_S, GAMMA_D, SIGMA = 0, 1, 2, 3
LABEL_NAMES = {INTERIOR: "interior", GAMMA_S: "gamma_s", GAMMA_D: "gamma_d", SIGMA: "sigma"}
STOKES, DARCY = 0, 1
REGION_NAMES = {STOKES: "S", DARCY: "D"}
_REGION_CODES = {"S": STOKES, "D": DARCY}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Interface:
    """Axis-aligned interface plane ``x[axis] == value``.

    ``stokes_above`` tells on which side the Stokes region lies.
    """

    axis: int
    value: float
    stokes_above: bool = True

    def normal(self, dim: int) -> np.ndarray:
        nu = np.zeros(dim)
        nu[self.axis] = -1.0 if self.stokes_above else 1.0
        return nu


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    cell_region: np.ndarray
    interface: Interface
    box: tuple[tuple[float, float], ...]
    facets: np.ndarray
    facet_cells: np.ndarray
    cell_facets: np.ndarray
    facet_label: np.ndarray
    facet_normal: np.ndarray
    facet_measure: np.ndarray
    edges: np.ndarray
    cell_edges: np.ndarray

    @classmethod
    def from_cells(cls, vertices, cells, cell_region, interface: Interface, box) -> "Mesh":
        vertices = np.asarray(vertices, dtype=float)
        cells = np.array(cells, dtype=np.int64)
        cell_region = np.asarray(cell_region, dtype=np.int8)
        dim = vertices.shape[1]

        # positive orientation
        amap = AffineMap.from_simplices(vertices[cells])
        neg = amap.det_jacobian < 0
        cells[neg, -2:] = cells[neg, -1:-3:-1]

        nc = len(cells)
        lf = local_facets(dim)
        all_f = np.sort(cells[:, lf].reshape(-1, dim), axis=1)
        facets, inv = np.unique(all_f, axis=0, return_inverse=True)
        inv = inv.ravel()
        cell_facets = inv.reshape(nc, dim + 1)
        owner = np.repeat(np.arange(nc), dim + 1)
        facet_cells = -np.ones((len(facets), 2), dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        sorted_f = inv[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_f[1:] != sorted_f[:-1]
        facet_cells[sorted_f[first], 0] = owner[order[first]]
        facet_cells[sorted_f[~first], 1] = owner[order[~first]]
        if np.any(np.bincount(inv, minlength=len(facets)) > 2):
            raise MeshError("nonconforming mesh: facet shared by more than two cells")

        meas, normal = facet_measure_normal(vertices[facets])
        fcoord = vertices[facets][:, :, interface.axis]
        on_plane = np.all(np.abs(fcoord - interface.value) < 1e-12, axis=1)
        boundary = facet_cells[:, 1] < 0
        label = np.full(len(facets), INTERIOR, dtype=np.int8)
        reg0 = cell_region[facet_cells[:, 0]]
        label[boundary & (reg0 == STOKES)] = GAMMA_S
        label[boundary & (reg0 == DARCY)] = GAMMA_D
        label[on_plane] = SIGMA

        # outward normals on the outer boundary
        centroid = vertices[cells].mean(axis=1)
        fc = vertices[facets].mean(axis=1)
        outer = boundary & ~on_plane
        flip = np.einsum("fi,fi->f", normal, fc - centroid[facet_cells[:, 0]]) < 0
        normal[outer & flip] *= -1.0
        nu = interface.normal(dim)
        normal[on_plane] = nu

        le = local_edges(dim)
        all_e = np.sort(cells[:, le].reshape(-1, 2), axis=1)
        edges, einv = np.unique(all_e, axis=0, return_inverse=True)
        cell_edges = einv.ravel().reshape(nc, len(le))

        return cls(
            dim, vertices, cells, cell_region, interface, tuple(map(tuple, box)),
            facets, facet_cells, cell_facets, label, normal, meas, edges, cell_edges,
        )

    # -- basic geometry -------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def affine_maps(self, cells=None) -> AffineMap:
        idx = slice(None) if cells is None else cells
        return AffineMap.from_simplices(self.vertices[self.cells[idx]])

    def cell_volumes(self) -> np.ndarray:
        return self.affine_maps().det_jacobian / np.prod(np.arange(1, self.dim + 1))

    def region_volume(self, region: str) -> float:
        return float(self.cell_volumes()[self.cell_region == _REGION_CODES[region]].sum())

    def facets_with_label(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.facet_label == label)

    def sigma_facets(self, side: str | None = None) -> np.ndarray:
        """Interface facets, optionally only those with a cell in region ``side``."""
        f = self.facets_with_label(SIGMA)
        if side is None:
            return f
        code = _REGION_CODES[side]
        fc = self.facet_cells[f]
        has = (self.cell_region[fc[:, 0]] == code) | ((fc[:, 1] >= 0) & (self.cell_region[np.maximum(fc[:, 1], 0)] == code))
        return f[has]

    def sigma_cell(self, facets: np.ndarray, side: str) -> np.ndarray:
        """The cell of region ``side`` adjacent to each interface facet."""
        code = _REGION_CODES[side]
        fc = self.facet_cells[facets]
        use0 = self.cell_region[fc[:, 0]] == code
        return np.where(use0, fc[:, 0], fc[:, 1])

    def local_facet_index(self, cells: np.ndarray, facets: np.ndarray) -> np.ndarray:
        hit = self.cell_facets[cells] == facets[:, None]
        if not np.all(hit.sum(axis=1) == 1):
            raise MeshError("facet is not a facet of the given cell")
        return np.argmax(hit, axis=1)

    @property
    def h(self) -> float:
        """Largest cell edge length."""
        e = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return float(np.sqrt((e**2).sum(axis=1)).max())

    # -- derived meshes --------------------------------------------------

    def restrict(self, region: str) -> "Mesh":
        """Submesh of one region, with interface facets on its boundary."""
        keep = self.cell_region == _REGION_CODES[region]
        cells = self.cells[keep]
        used = np.unique(cells)
        renum = -np.ones(self.n_vertices, dtype=np.int64)
        renum[used] = np.arange(len(used))
        return Mesh.from_cells(self.vertices[used], renum[cells], self.cell_region[keep], self.interface, self.box)

    def refine(self) -> "Mesh":
        return refine_uniform(self)


def build_structured(dim: int, box=None, n: int = 4, split: float = 0.5, axis: int | None = None,
                     stokes_above: bool = True) -> Mesh:
    """Kuhn triangulation of a box with ``n`` cells per axis.

    The region on the Stokes side of the plane ``x[axis] == split`` (upper
    side by default, ``axis`` defaults to the last coordinate) is tagged S,
    the rest D.  Squares split into 2 triangles, cubes into 6 tetrahedra
    along the main diagonal, so that shared faces triangulate identically.
    """
    if dim not in (2, 3):
        raise MeshError(f"unsupported dimension {dim}")
    if n < 1:
        raise MeshError("need at least one cell per axis")
    box = np.array(box if box is not None else [(0.0, 1.0)] * dim, dtype=float)
    axis = dim - 1 if axis is None else axis
    lo, hi = box[axis]
    t = (split - lo) / (hi - lo) * n
    if not (abs(t - round(t)) < 1e-9 and 0 < round(t) < n):
        raise MeshError(f"split plane x[{axis}]={split} is not an interior grid plane for n={n}")

    axes = [np.linspace(box[k, 0], box[k, 1], n + 1) for k in range(dim)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel(order="F") for g in grid], axis=-1)
    strides = np.array([(n + 1) ** k for k in range(dim)])

    origins = np.stack(np.meshgrid(*[np.arange(n)] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    cells = []
    for perm in permutations(range(dim)):
        path = [np.zeros(dim, dtype=int)]
        for k in perm:
            step = path[-1].copy()
            step[k] += 1
            path.append(step)
        offs = np.array([p @ strides for p in path])
        cells.append((origins @ strides)[:, None] + offs)
    cells = np.concatenate(cells)
    centroid_axis = vertices[cells][:, :, axis].mean(axis=1)
    above = centroid_axis > split
    region = np.where(above == stokes_above, STOKES, DARCY)
    return Mesh.from_cells(vertices, cells, region, Interface(axis, float(split), stokes_above), box)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every cell into ``2**dim`` children (red refinement).

    In 3D the tetrahedra are subdivided following Bey's rule with the cell
    vertices ordered by coordinate sum; for Kuhn meshes the children are
    again Kuhn simplices.  Region tags are inherited by the children and
    facet tags follow because children of a facet stay in its plane.
    """
    dim = mesh.dim
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    key = mesh.vertices.sum(axis=1)

    le = local_edges(dim)
    edge_of = {pair: k for k, pair in enumerate(le)}
    children = []
    for c in range(mesh.n_cells):
        order = np.argsort(key[mesh.cells[c]], kind="stable")
        v = mesh.cells[c][order]

        def m(i, j, c=c, order=order):
            a, b = sorted((order[i], order[j]))
            return nv + mesh.cell_edges[c, edge_of[(a, b)]]

        if dim == 2:
            children += [
                (v[0], m(0, 1), m(0, 2)), (m(0, 1), v[1], m(1, 2)),
                (m(0, 2), m(1, 2), v[2]), (m(0, 1), m(1, 2), m(0, 2)),
            ]
        else:
            x01, x02, x03, x12, x13, x23 = m(0, 1), m(0, 2), m(0, 3), m(1, 2), m(1, 3), m(2, 3)
            children += [
                (v[0], x01, x02, x03), (x01, v[1], x12, x13), (x02, x12, v[2], x23), (x03, x13, x23, v[3]),
                (x01, x02, x03, x13), (x01, x02, x12, x13), (x02, x03, x13, x23), (x02, x12, x13, x23),
            ]
    region = np.repeat(mesh.cell_region, 2**dim)
    return Mesh.from_cells(vertices, np.array(children), region, mesh.interface, mesh.box)


# ---------------------------------------------------------------------------
# mesh pairs


MATCHING, NESTED, INDEPENDENT = "matching", "nested", "independent"


@dataclass(frozen=True, eq=False)
class MeshPair:
    stokes_mesh: Mesh
    darcy_mesh: Mesh
    interface_relation: str

    @property
    def h_stokes(self) -> float:
        return self.stokes_mesh.h

    @property
    def h_darcy(self) -> float:
        return self.darcy_mesh.h


def _sigma_simplices(mesh: Mesh) -> np.ndarray:
    """Interface facets as simplices in the plane coordinates, shape (f, d, d-1)."""
    f = mesh.sigma_facets()
    keep = [k for k in range(mesh.dim) if k != mesh.interface.axis]
    return mesh.vertices[mesh.facets[f]][:, :, keep]


def _contains(simplices: np.ndarray, points: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Boolean (p, s): point p lies in closed simplex s (all in R^{d-1})."""
    x0 = simplices[:, 0]
    T = np.transpose(simplices[:, 1:] - x0[:, None], (0, 2, 1))
    Tinv = np.linalg.inv(T)
    lam = np.einsum("sij,psj->psi", Tinv, points[:, None, :] - x0[None])
    lam0 = 1.0 - lam.sum(axis=-1)
    return np.all(lam >= -tol, axis=-1) & (lam0 >= -tol)


def classify_interface(stokes_mesh: Mesh, darcy_mesh: Mesh) -> str:
    """Compare the interface partitions of two meshes.

    Returns ``matching`` for identical partitions, ``nested`` if every Darcy
    interface facet lies inside exactly one Stokes interface facet, and
    ``independent`` otherwise.
    """
    if stokes_mesh.interface.axis != darcy_mesh.interface.axis or abs(
        stokes_mesh.interface.value - darcy_mesh.interface.value
    ) > 1e-12:
        raise MeshError("the two meshes do not share the interface plane")
    S = _sigma_simplices(stokes_mesh)
    D = _sigma_simplices(darcy_mesh)
    area = lambda X: np.abs(np.linalg.det(X[:, 1:] - X[:, :1])).sum()  # noqa: E731
    bbox = lambda X: np.r_[X.reshape(-1, X.shape[-1]).min(0), X.reshape(-1, X.shape[-1]).max(0)]  # noqa: E731
    if len(S) == 0 or len(D) == 0 or abs(area(S) - area(D)) > 1e-12 * area(S) or np.abs(bbox(S) - bbox(D)).max() > 1e-12:
        raise MeshError("interface facet sets of the two meshes cover different regions")
    key = lambda X: {tuple(sorted(map(tuple, np.round(s, 12)))) for s in X}  # noqa: E731
    if key(S) == key(D):
        return MATCHING
    inside = np.ones((len(D), len(S)), dtype=bool)
    for k in range(D.shape[1]):
        inside &= _contains(S, D[:, k])
    if np.all(inside.sum(axis=1) == 1):
        return NESTED
    return INDEPENDENT


def build_pair(dim: int, box=None, n_stokes: int = 4, n_darcy: int = 4, split: float = 0.5) -> MeshPair:
    """Independent Kuhn meshes of the Stokes and Darcy regions.

    ``n_stokes`` and ``n_darcy`` are the number of cells per axis of the full
    box used for each side, so ``h_S = 1/n_stokes`` on the unit box.
    """
    if n_stokes < 1 or n_darcy < 1:
        raise MeshError("need at least one cell per axis on each side")
    ms = build_structured(dim, box, n_stokes, split).restrict("S")
    md = build_structured(dim, box, n_darcy, split).restrict("D")
    return MeshPair(ms, md, classify_interface(ms, md))


# ---------------------------------------------------------------------------
# plain-text dump

_HEADER = "# stokesdarcy-mesh v1 | sections: VERTICES x..; CELLS v.. region(S|D); FACETS v.. label"


def write_mesh(mesh: Mesh, path) -> None:
    """Write the mesh as whitespace-separated text with a header line."""
    inter = mesh.interface
    lines = [_HEADER, f"DIM {mesh.dim}",
             f"INTERFACE {inter.axis} {float(inter.value)!r} {int(inter.stokes_above)}",
             "BOX " + " ".join(f"{float(a)!r} {float(b)!r}" for a, b in mesh.box),
             f"VERTICES {mesh.n_vertices}"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells}")
    lines += [" ".join(map(str, c)) + " " + REGION_NAMES[int(r)] for c, r in zip(mesh.cells, mesh.cell_region)]
    lines.append(f"FACETS {mesh.n_facets}")
    lines += [" ".join(map(str, f)) + " " + LABEL_NAMES[int(lab)] for f, lab in zip(mesh.facets, mesh.facet_label)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read a mesh written by :func:`write_mesh`; topology is rebuilt."""
    it = iter(Path(path).read_text().splitlines())
    next(it)
    dim = int(next(it).split()[1])
    _, axis, value, above = next(it).split()
    box_vals = [float(x) for x in next(it).split()[1:]]
    box = list(zip(box_vals[::2], box_vals[1::2]))
    nv = int(next(it).split()[1])
    verts = np.array([[float(x) for x in next(it).split()] for _ in range(nv)])
    if verts.shape[1] != dim:
        raise MeshError(f"vertex coordinates are {verts.shape[1]}D but the header says {dim}D")
    nc = int(next(it).split()[1])
    cells, region = [], []
    for _ in range(nc):
        parts = next(it).split()
        cells.append([int(x) for x in parts[:-1]])
        region.append(_REGION_CODES[parts[-1]])
    return Mesh.from_cells(verts, np.array(cells), np.array(region),
                           Interface(int(axis), float(value), bool(int(above))), box)
