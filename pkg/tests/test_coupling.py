import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stokesdarcy.coupling import (
    build_coupling, darcy_trace_space, intersect_interfaces, project, projection_residual, trace_moments,
)
from stokesdarcy.mesh import build_pair
from stokesdarcy.spaces import build_spaces

LAYOUTS = [(2, 4, 4), (2, 4, 8), (2, 6, 4), (2, 4, 6), (3, 2, 2), (3, 2, 4), (3, 4, 2), (3, 4, 6)]


def spaces_for(pair, dim, ns, nd):
    mp = build_pair(dim, n_stokes=ns, n_darcy=nd)
    return build_spaces(pair, mp.stokes_mesh, mp.darcy_mesh)


@pytest.mark.parametrize("dim,ns,nd", LAYOUTS)
def test_intersection_covers_interface(dim, ns, nd):
    mp = build_pair(dim, n_stokes=ns, n_darcy=nd)
    inter = intersect_interfaces(mp.stokes_mesh, mp.darcy_mesh)
    _, w = inter.quadrature(0)
    assert w.sum() == pytest.approx(1.0, rel=1e-12)
    # every piece lies inside its Stokes facet and its Darcy facet
    centroid = inter.simplices.mean(axis=1)
    for mesh, facets in ((mp.stokes_mesh, inter.stokes_facets),
                         (mp.darcy_mesh, mp.darcy_mesh.sigma_facets()[inter.darcy_facets])):
        V = mesh.vertices[mesh.facets[facets]]
        lo, hi = V.min(axis=1) - 1e-12, V.max(axis=1) + 1e-12
        assert np.all((centroid >= lo) & (centroid <= hi))


@pytest.mark.parametrize("pair", ["mini-rt0", "mini-bdm1", "br-rt0", "th2-rt1"])
@pytest.mark.parametrize("dim,ns,nd", LAYOUTS)
def test_constraint_equals_projected_stokes_flux(pair, dim, ns, nd):
    """Darcy trace of ``C u_S`` equals ``R(u_S . nu)`` at interface quadrature points."""
    sp_ = spaces_for(pair, dim, ns, nd)
    coupling = build_coupling(sp_.stokes_velocity, sp_.darcy_velocity)
    A = np.arange(1, dim * dim + 1).reshape(dim, dim) / 3.0

    def field(x):
        return x @ A.T + np.linspace(0.5, 1.0, dim)

    u_S = sp_.stokes_velocity.interpolate(field)
    nu = sp_.darcy_mesh.interface.normal(dim)
    trace = coupling.trace
    r = project(trace, lambda x: field(x) @ nu)
    u_D = np.zeros(sp_.darcy_velocity.n_dofs)
    cons = coupling.constraints
    u_D[cons.slave] = cons.apply(u_S)
    pts, _ = trace.quadrature(4)
    cells = trace.mesh.facet_cells[trace.facets, 0]
    vals = sp_.darcy_velocity.evaluate(u_D, cells, trace.mesh.affine_maps(cells).pull(pts)).values
    assert np.abs(vals @ nu - trace.evaluate(r, pts)).max() < 1e-10


@pytest.mark.parametrize("pair", ["mini-rt0", "mini-bdm1", "th2-rt1", "th2-bdm2"])
def test_constraint_map_is_mixed_mass(pair):
    """With the moment basis as trace basis, T^-1 M_DD^-1 M_DS reduces to M_DS."""
    sp_ = spaces_for(pair, 2, 4, 6)
    c = build_coupling(sp_.stokes_velocity, sp_.darcy_velocity)
    C = c.constraints.C.toarray()
    M = c.M_DS.toarray()
    assert np.abs(C - M).max() <= 1e-13 * np.abs(M).max()


def test_interface_datum_enters_offset():
    sp_ = spaces_for("mini-rt0", 2, 4, 8)
    c = build_coupling(sp_.stokes_velocity, sp_.darcy_velocity, g_nu=lambda x: np.full(x.shape[:-1], 2.0))
    # RT0 DOFs are facet fluxes: the constant datum 2 gives 2 |f| up to orientation
    meas = sp_.darcy_mesh.facet_measure[c.trace.facets]
    assert np.allclose(np.abs(c.constraints.g), 2.0 * meas)


def smooth(a, b, c):
    return lambda x: a * np.sin(3 * x[..., 0] + b) + c * x[..., 0] ** 2 + np.cos(x[..., -2] * b)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.sampled_from(["RT0", "BDM1"]), st.sampled_from([2, 3]))
def test_projection_properties(a, b, c, family, dim):
    mp = build_pair(dim, n_stokes=2, n_darcy=4)
    from stokesdarcy.spaces import HdivSpace
    trace = darcy_trace_space(HdivSpace(mp.darcy_mesh, family))
    f = smooth(a, b, c)
    r = project(trace, f)
    pts, w = trace.quadrature(12)
    fx = f(pts)
    rx = trace.evaluate(r, pts)
    # contraction and mean preservation
    assert np.sqrt(np.sum(w * rx**2)) <= np.sqrt(np.sum(w * fx**2)) * (1 + 1e-12) + 1e-14
    assert np.sum(w * rx) == pytest.approx(np.sum(w * fx), abs=1e-10)
    # idempotence: projecting the projection changes nothing
    def rf(x):
        # x arrives facet by facet, as produced by the trace quadrature
        return trace.evaluate(r, x.reshape(len(trace.facets), -1, dim)).ravel()

    r2 = project(trace, rf, degree=trace.degree * 2)
    assert np.allclose(r2, r, atol=1e-12)
    # orthogonality: the residual is orthogonal to the trace space
    res = trace_moments(trace, f, 12) - trace_moments(trace, rf, 12)
    assert np.abs(res).max() < 1e-12


@pytest.mark.parametrize("family,order", [("RT0", 1.0), ("BDM1", 2.0)])
def test_projection_residual_rate(family, order):
    from stokesdarcy.spaces import HdivSpace
    f = smooth(1.0, 0.3, 0.5)
    errs = []
    for n in (8, 16, 32):
        mp = build_pair(2, n_stokes=4, n_darcy=n)
        errs.append(projection_residual(f, darcy_trace_space(HdivSpace(mp.darcy_mesh, family))))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(np.abs(rates - order) < 0.1)
