"""Reference simplices, quadrature, shape functions and affine/Piola maps.

Reference simplices are the unit simplices ``{x_i >= 0, sum(x) <= 1}`` with
vertices ``0, e_1, ..., e_d``.  Local facet ``i`` is the facet opposite local
vertex ``i``; local edges are the vertex pairs ``(i, j)``, ``i < j``, in
lexicographic order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, product

import numpy as np
from scipy.special import roots_jacobi

MAX_QUAD_DEGREE = 30


def reference_vertices(dim: int) -> np.ndarray:
    return np.vstack([np.zeros(dim), np.eye(dim)])


def local_edges(dim: int) -> list[tuple[int, int]]:
    return list(combinations(range(dim + 1), 2))


def local_facets(dim: int) -> list[tuple[int, ...]]:
    """Local vertex tuples of each facet, facet ``i`` opposite vertex ``i``."""
    return [tuple(j for j in range(dim + 1) if j != i) for i in range(dim + 1)]


def simplex_measure(dim: int) -> float:
    return 1.0 / math.factorial(dim)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadRule:
    """Quadrature rule on the reference simplex of dimension ``dim``."""

    dim: int
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self) -> int:
        return len(self.weights)


def _gauss_jacobi01(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    # rule for int_0^1 f(s) (1 - s)^alpha ds
    x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1.0)


@lru_cache(maxsize=None)
def quadrature(dim: int, degree: int) -> QuadRule:
    """Collapsed-coordinate Gauss-Jacobi rule exact for polynomials of ``degree``.

    The rule is a conical product (Stroud): Gauss-Jacobi points in the
    collapsed directions absorb the Duffy Jacobian, so all weights are
    positive and the rule is exact to the requested total degree.
    """
    if dim not in (0, 1, 2, 3):
        raise ValueError(f"unsupported quadrature dimension {dim}")
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree} (0..{MAX_QUAD_DEGREE})")
    if dim == 0:
        return QuadRule(0, np.zeros((1, 0)), np.ones(1), degree)
    n = max(1, math.ceil((degree + 1) / 2))
    rules = [_gauss_jacobi01(n, float(dim - 1 - k)) for k in range(dim)]
    pts, wts = [], []
    for idx in product(range(n), repeat=dim):
        s = [rules[k][0][idx[k]] for k in range(dim)]
        w = np.prod([rules[k][1][idx[k]] for k in range(dim)])
        x = np.empty(dim)
        scale = 1.0
        for k in range(dim):
            x[k] = s[k] * scale
            scale *= 1.0 - s[k]
        pts.append(x)
        wts.append(w)
    return QuadRule(dim, np.array(pts), np.array(wts), degree)


def facet_quadrature(dim: int, facet: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Points on local facet ``facet`` of the reference cell and weights.

    Weights integrate over the reference facet with its true measure.
    """
    rule = quadrature(dim - 1, degree)
    verts = reference_vertices(dim)[list(local_facets(dim)[facet])]
    edges = verts[1:] - verts[0]
    pts = verts[0] + rule.points @ edges
    measure, _ = facet_measure_normal(verts[None])
    return pts, rule.weights * measure[0] / simplex_measure(dim - 1)


def barycentric(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.concatenate([1.0 - points.sum(axis=-1, keepdims=True), points], axis=-1)


def barycentric_gradients(dim: int) -> np.ndarray:
    """Reference gradients of the barycentric coordinates, shape (dim+1, dim)."""
    return np.vstack([-np.ones(dim), np.eye(dim)])


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class AffineMap:
    """Affine maps ``x = J xhat + x0`` for a batch of simplices."""

    jacobian: np.ndarray
    translation: np.ndarray
    det_jacobian: np.ndarray
    inverse_transpose: np.ndarray

    @classmethod
    def from_simplices(cls, coords: np.ndarray) -> "AffineMap":
        coords = np.asarray(coords, dtype=float)
        x0 = coords[:, 0, :]
        jac = np.transpose(coords[:, 1:, :] - x0[:, None, :], (0, 2, 1))
        det = np.linalg.det(jac)
        invt = np.transpose(np.linalg.inv(jac), (0, 2, 1))
        return cls(jac, x0, det, invt)

    def __len__(self) -> int:
        return len(self.det_jacobian)

    def __getitem__(self, idx) -> "AffineMap":
        return AffineMap(
            self.jacobian[idx], self.translation[idx], self.det_jacobian[idx], self.inverse_transpose[idx]
        )

    def push(self, ref_points: np.ndarray) -> np.ndarray:
        """Map reference points, shared ``(q, d)`` or per cell ``(c, q, d)``."""
        if ref_points.ndim == 2:
            return np.einsum("cij,qj->cqi", self.jacobian, ref_points) + self.translation[:, None, :]
        return np.einsum("cij,cqj->cqi", self.jacobian, ref_points) + self.translation[:, None, :]

    def pull(self, points: np.ndarray) -> np.ndarray:
        """Inverse map of per-cell physical points ``(c, q, d)``."""
        return np.einsum("cji,cqj->cqi", self.inverse_transpose, points - self.translation[:, None, :])


def facet_measure_normal(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Measure and unit normal of facets given by vertex coordinates ``(f, d, d)``.

    The normal orientation follows the vertex order: in 2D the edge tangent
    rotated clockwise, in 3D ``(v1 - v0) x (v2 - v0)``.
    """
    coords = np.asarray(coords, dtype=float)
    dim = coords.shape[-1]
    if dim == 2:
        t = coords[:, 1] - coords[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=-1)
        meas = np.linalg.norm(n, axis=-1)
        return meas, n / meas[:, None]
    if dim == 3:
        n = np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0])
        nn = np.linalg.norm(n, axis=-1)
        return nn / 2.0, n / nn[:, None]
    raise ValueError(f"unsupported dimension {dim}")


def reference_facet_normals(dim: int) -> np.ndarray:
    normals = -np.eye(dim + 1, dim, k=-1)
    normals[0] = np.ones(dim) / math.sqrt(dim)
    return normals


def piola_push(amap: AffineMap, ref_values: np.ndarray, ref_div: np.ndarray | None = None):
    """Contravariant Piola transform of H(div) shape functions.

    ``ref_values`` has shape ``(q, b, d)`` (shared by all cells) or
    ``(c, q, b, d)``; ``ref_div`` correspondingly ``(q, b)`` or ``(c, q, b)``.
    """
    scale = 1.0 / amap.det_jacobian
    if ref_values.ndim == 3:
        vals = np.einsum("cij,qbj->cqbi", amap.jacobian, ref_values)
    else:
        vals = np.einsum("cij,cqbj->cqbi", amap.jacobian, ref_values)
    vals *= scale[:, None, None, None]
    if ref_div is None:
        return vals
    if ref_div.ndim == 2:
        div = ref_div[None] * scale[:, None, None]
    else:
        div = ref_div * scale[:, None, None]
    return vals, div


# ---------------------------------------------------------------------------
# scalar shape functions

SCALAR_FAMILIES = ("P0", "P1", "P2", "P1b", "P2b", "P1dc")


@dataclass(frozen=True)
class ScalarElement:
    """Lagrange-type scalar element, optionally enriched by the cell bubble.

    ``entities`` lists, per local shape function, the owning entity as
    ``(entity_dim, local_index)`` where entity_dim is 0 (vertex), 1 (edge)
    or ``dim`` (cell).  The cell bubble is the unnormalised product of all
    barycentric coordinates.
    """

    family: str
    dim: int
    degree: int
    entities: tuple[tuple[int, int], ...]

    @property
    def ndofs(self) -> int:
        return len(self.entities)

    def tabulate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(..., b)`` and reference gradients ``(..., b, d)``."""
        return eval_scalar_basis(self.family, self.dim, points)


@lru_cache(maxsize=None)
def scalar_element(family: str, dim: int) -> ScalarElement:
    if family not in SCALAR_FAMILIES:
        raise ValueError(f"unknown scalar family {family!r}")
    verts = tuple((0, i) for i in range(dim + 1))
    edges = tuple((1, i) for i in range(len(local_edges(dim))))
    cell = ((dim, 0),)
    entities, degree = {
        "P0": (cell, 0),
        "P1": (verts, 1),
        "P1dc": (verts, 1),
        "P2": (verts + edges, 2),
        "P1b": (verts + cell, dim + 1),
        "P2b": (verts + edges + cell, dim + 1),
    }[family]
    return ScalarElement(family, dim, degree, entities)


def eval_scalar_basis(family: str, dim: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the local scalar basis of ``family`` at reference ``points``."""
    points = np.asarray(points, dtype=float)
    lam = barycentric(points)
    dlam = barycentric_gradients(dim)
    shape = points.shape[:-1]
    vals, grads = [], []
    if family == "P0":
        return np.ones(shape + (1,)), np.zeros(shape + (1, dim))
    if family in ("P1", "P1dc", "P1b"):
        for i in range(dim + 1):
            vals.append(lam[..., i])
            grads.append(np.broadcast_to(dlam[i], shape + (dim,)))
    elif family in ("P2", "P2b"):
        for i in range(dim + 1):
            vals.append(lam[..., i] * (2.0 * lam[..., i] - 1.0))
            grads.append((4.0 * lam[..., i] - 1.0)[..., None] * dlam[i])
        for i, j in local_edges(dim):
            vals.append(4.0 * lam[..., i] * lam[..., j])
            grads.append(4.0 * (lam[..., j, None] * dlam[i] + lam[..., i, None] * dlam[j]))
    else:
        raise ValueError(f"unknown scalar family {family!r}")
    if family in ("P1b", "P2b"):
        b, db = _bubble(lam, dlam, range(dim + 1))
        vals.append(b)
        grads.append(db)
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


def _bubble(lam: np.ndarray, dlam: np.ndarray, idx) -> tuple[np.ndarray, np.ndarray]:
    idx = list(idx)
    val = np.prod(lam[..., idx], axis=-1)
    grad = np.zeros(lam.shape[:-1] + (dlam.shape[1],))
    for i in idx:
        others = [j for j in idx if j != i]
        grad += np.prod(lam[..., others], axis=-1)[..., None] * dlam[i]
    return val, grad


def facet_bubble(dim: int, facet: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Product of the barycentrics of the facet vertices, and its reference gradient."""
    lam = barycentric(points)
    return _bubble(lam, barycentric_gradients(dim), local_facets(dim)[facet])


# ---------------------------------------------------------------------------
# H(div) shape functions

HDIV_SUPPORTED = {
    ("RT", 0, 2), ("RT", 1, 2), ("BDM", 1, 2), ("BDM", 2, 2),
    ("RT", 0, 3), ("RT", 1, 3), ("BDM", 1, 3),
}


def monomial_exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    exps = [e for e in product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    return sorted(exps, key=lambda e: (sum(e), tuple(-x for x in e)))


def eval_monomials(exps: list[tuple[int, ...]], points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Monomial values ``(..., m)`` and gradients ``(..., m, d)``."""
    points = np.asarray(points, dtype=float)
    e = np.array(exps)
    dim = points.shape[-1]
    vals = np.prod(points[..., None, :] ** e, axis=-1)
    grads = np.zeros(vals.shape + (dim,))
    for c in range(dim):
        ec = e.copy()
        ec[:, c] = np.maximum(ec[:, c] - 1, 0)
        grads[..., c] = e[:, c] * np.prod(points[..., None, :] ** ec, axis=-1)
    return vals, grads


def facet_test_functions(dim: int, facet: int, degree: int):
    """Test functions of the facet moments on local facet ``facet``.

    Returns a list of ``(callable(lam) -> values, associated local vertex)``;
    the vertex is -1 for functions symmetric under facet vertex permutations.
    """
    fv = local_facets(dim)[facet]
    if degree == 0:
        return [(lambda lam: np.ones(lam.shape[:-1]), -1)]
    if degree == 1:
        return [((lambda lam, a=a: lam[..., a]), a) for a in fv]
    if degree == 2 and dim == 2:
        a, b = fv
        return [
            ((lambda lam, a=a: lam[..., a] * (2 * lam[..., a] - 1)), a),
            ((lambda lam, b=b: lam[..., b] * (2 * lam[..., b] - 1)), b),
            ((lambda lam, a=a, b=b: 4 * lam[..., a] * lam[..., b]), -1),
        ]
    raise ValueError(f"facet moments of degree {degree} not supported in {dim}D")


@dataclass(frozen=True)
class HdivElement:
    """H(div) element on the reference simplex with facet/interior moment DOFs.

    Attributes
    ----------
    coeffs : (b, d, m) coefficients of the dual basis in the monomial basis
    facet_dofs : per local facet, tuple of (local dof, associated local vertex)
    interior_dofs : local dofs of the interior moments
    dof_points, dof_weights : the DOF functionals as
        ``l_i(u) = sum_q dof_weights[i, q, :] . u(dof_points[q])``
    """

    family: str
    degree: int
    dim: int
    exponents: tuple[tuple[int, ...], ...]
    coeffs: np.ndarray
    facet_dofs: tuple[tuple[tuple[int, int], ...], ...]
    interior_dofs: tuple[int, ...]
    dof_points: np.ndarray
    dof_weights: np.ndarray

    @property
    def ndofs(self) -> int:
        return self.coeffs.shape[0]

    @property
    def facet_degree(self) -> int:
        return self.degree

    @property
    def poly_degree(self) -> int:
        return self.degree + 1 if self.family == "RT" else self.degree

    def tabulate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reference values ``(..., b, d)`` and divergences ``(..., b)``."""
        mv, mg = eval_monomials(list(self.exponents), points)
        vals = np.einsum("bcm,...m->...bc", self.coeffs, mv)
        div = np.einsum("bcm,...mc->...b", self.coeffs, mg)
        return vals, div

    def apply_dofs(self, values: np.ndarray) -> np.ndarray:
        """Apply the DOF functionals to field values at ``dof_points``."""
        return np.einsum("iqc,...qc->...i", self.dof_weights, values)


def _prime_basis(family: str, k: int, dim: int, exps: list[tuple[int, ...]]) -> np.ndarray:
    index = {e: i for i, e in enumerate(exps)}
    basis = []
    for c in range(dim):
        for e in exps:
            if sum(e) <= k:
                p = np.zeros((dim, len(exps)))
                p[c, index[e]] = 1.0
                basis.append(p)
    if family == "RT":
        for e in exps:
            if sum(e) == k:
                p = np.zeros((dim, len(exps)))
                for c in range(dim):
                    e2 = list(e)
                    e2[c] += 1
                    p[c, index[tuple(e2)]] = 1.0
                basis.append(p)
    return np.array(basis)


def _interior_tests(family: str, k: int, dim: int):
    # RT(k): moments against P_{k-1}^d; BDM(k): against first-kind Nedelec N_{k-1}
    if k == 0 or (family == "BDM" and k == 1):
        return []
    if family == "RT" and k == 1:
        return [(lambda x, c=c: np.eye(dim)[c] * np.ones(x.shape[:-1] + (1,))) for c in range(dim)]
    if family == "BDM" and k == 2 and dim == 2:
        tests = [(lambda x, c=c: np.eye(2)[c] * np.ones(x.shape[:-1] + (1,))) for c in range(2)]
        tests.append(lambda x: np.stack([-x[..., 1], x[..., 0]], axis=-1))
        return tests
    raise ValueError(f"unsupported H(div) element {family}({k}) in {dim}D")


@lru_cache(maxsize=None)
def hdiv_element(family: str, degree: int, dim: int) -> HdivElement:
    """Build the reference ``family(degree)`` element (``RT`` or ``BDM``)."""
    if (family, degree, dim) not in HDIV_SUPPORTED:
        raise ValueError(f"unsupported H(div) element {family}({degree}) in {dim}D")
    pdeg = degree + 1 if family == "RT" else degree
    exps = monomial_exponents(dim, pdeg)
    prime = _prime_basis(family, degree, dim, exps)
    normals = reference_facet_normals(dim)

    points, weights = [], []  # per dof: list of (point block, weight block)
    facet_dofs = []
    qdeg = 2 * pdeg + 2
    dof = 0
    for f in range(dim + 1):
        fpts, fw = facet_quadrature(dim, f, qdeg)
        lam = barycentric(fpts)
        entries = []
        for test, vertex in facet_test_functions(dim, f, degree):
            w = (fw * test(lam))[:, None] * normals[f]
            points.append(fpts)
            weights.append(w)
            entries.append((dof, vertex))
            dof += 1
        facet_dofs.append(tuple(entries))
    interior = []
    tests = _interior_tests(family, degree, dim)
    if tests:
        rule = quadrature(dim, qdeg)
        for test in tests:
            points.append(rule.points)
            weights.append(rule.weights[:, None] * test(rule.points))
            interior.append(dof)
            dof += 1

    # stack all dof functionals on a common point set (block diagonal in q)
    all_pts = np.concatenate(points)
    W = np.zeros((dof, len(all_pts), dim))
    start = 0
    for i, (p, w) in enumerate(zip(points, weights)):
        W[i, start:start + len(p)] = w
        start += len(p)
    # dedupe identical point blocks to keep the tables small
    uniq, inv = np.unique(np.round(all_pts, 15), axis=0, return_inverse=True)
    inv = inv.ravel()
    Wu = np.zeros((dof, len(uniq), dim))
    np.add.at(Wu, (slice(None), inv), W)
    uniq_pts = all_pts[np.unique(inv, return_index=True)[1]]

    if len(prime) != dof:
        raise ValueError(f"{family}({degree}) in {dim}D: {len(prime)} prime functions vs {dof} dofs")
    mv, _ = eval_monomials(exps, uniq_pts)
    prime_vals = np.einsum("jcm,qm->jqc", prime, mv)
    V = np.einsum("iqc,jqc->ij", Wu, prime_vals)
    if np.linalg.cond(V) > 1e10:
        raise ValueError(f"{family}({degree}) DOFs are not unisolvent")
    A = np.linalg.solve(V.T, np.eye(dof))  # A V^T = I
    coeffs = np.einsum("kj,jcm->kcm", A, prime)
    coeffs[np.abs(coeffs) < 1e-14] = 0.0
    return HdivElement(
        family, degree, dim, tuple(exps), coeffs, tuple(facet_dofs), tuple(interior), uniq_pts, Wu
    )


def eval_hdiv_basis(family: str, degree: int, dim: int, points: np.ndarray):
    """Reference values and divergences of the ``family(degree)`` shape functions."""
    return hdiv_element(family, degree, dim).tabulate(points)
