from types import SimpleNamespace

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from stokesdarcy.assembly import ProblemCoefficients, assemble_system
from stokesdarcy.mesh import build_pair
from stokesdarcy.mms import compute_errors, desk_solution_2d, get_solution, paper_solution_3d
from stokesdarcy.solver import solve
from stokesdarcy.spaces import build_spaces

SOLUTIONS = [desk_solution_2d(), paper_solution_3d()]
IDS = ["desk_2d", "paper_3d"]


def rand_points(box, n=12, seed=0):
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * (0.1 + 0.8 * rng.random((n, len(box))))


def fd_grad(f, x, h=1e-5):
    """Central differences, last axis of the result is the derivative direction."""
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def box_integral(f, box, n=30):
    t, w = leggauss(n)
    axes = [(0.5 * (hi - lo) * t + 0.5 * (hi + lo), 0.5 * (hi - lo) * w) for lo, hi in box]
    X = np.stack(np.meshgrid(*[a[0] for a in axes], indexing="ij"), axis=-1)
    W = np.prod(np.stack(np.meshgrid(*[a[1] for a in axes], indexing="ij"), axis=-1), axis=-1)
    return float(np.sum(W * f(X)))


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_stokes_velocity_divergence_free(ex):
    x = rand_points(ex.stokes_box, 20)
    assert np.abs(ex.div_u_S(x)).max() < 1e-12
    assert np.abs(np.trace(fd_grad(ex.u_S, x), axis1=-2, axis2=-1)).max() < 1e-8


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_boundary_conditions(ex):
    rng = np.random.default_rng(1)
    d = ex.dim
    for k in range(d):
        for side in (0, 1):
            # Stokes outer boundary: every face but the interface
            if not (k == d - 1 and side == 0):
                x = rand_points(ex.stokes_box, 10, seed=k + 3 * side)
                x[:, k] = ex.stokes_box[k][side]
                assert np.abs(ex.u_S(x)).max() < 1e-12
            # Darcy outer boundary: zero normal flux
            if not (k == d - 1 and side == 1):
                x = rand_points(ex.darcy_box, 10, seed=7 + k + 3 * side)
                x[:, k] = ex.darcy_box[k][side]
                assert np.abs(ex.u_D(x)[:, k]).max() < 1e-12
    assert rng is not None


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_hand_derivatives_match_finite_differences(ex):
    xs = rand_points(ex.stokes_box)
    xd = rand_points(ex.darcy_box)
    assert np.allclose(ex.grad_u_S(xs), fd_grad(ex.u_S, xs), atol=1e-8)
    assert np.allclose(ex.grad_p_D(xd), fd_grad(ex.p_D, xd), atol=1e-7)
    assert np.allclose(ex.div_u_D(xd), np.trace(fd_grad(ex.u_D, xd), axis1=-2, axis2=-1), atol=1e-5)


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_stokes_source_matches_strong_form(ex):
    """``f_S = -div(2 nu eps(u)) + grad p`` by nested finite differences."""
    x = rand_points(ex.stokes_box)

    def stress(y):
        G = fd_grad(ex.u_S, y, 1e-4)
        return 2 * ex.nu * 0.5 * (G + np.swapaxes(G, -1, -2))

    dS = fd_grad(stress, x, 1e-4)  # (n, i, j, k) = d_k sigma_ij
    f = -np.einsum("nijj->ni", dS) + fd_grad(ex.p_S, x)
    scale = np.abs(ex.f_S(x)).max()
    assert np.abs(f - ex.f_S(x)).max() < 1e-6 * max(scale, 1.0)


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_interface_data(ex):
    x = rand_points(ex.stokes_box)
    x[:, -1] = 0.5
    n = ex.normal
    G = ex.grad_u_S(x)
    sigma_n = ex.nu * (G + np.swapaxes(G, -1, -2)) @ n - ex.p_S(x)[:, None] * n
    u = ex.u_S(x)
    slip = ex.nu / ex.kappa * (u - (u @ n)[:, None] * n)
    assert np.allclose(ex.g_t(x), sigma_n + slip + ex.p_D(x)[:, None] * n, atol=1e-12)
    assert np.allclose(ex.g_nu(x), (ex.u_D(x) - ex.u_S(x)) @ n, atol=1e-14)


@pytest.mark.parametrize("ex", SOLUTIONS, ids=IDS)
def test_darcy_pressure_normalized_and_data_compatible(ex):
    assert abs(box_integral(ex.p_D, ex.darcy_box)) < 1e-10
    sigma_box = list(ex.darcy_box[:-1])

    def on_sigma(y):
        return ex.g_nu(np.concatenate([y, np.full(y.shape[:-1] + (1,), 0.5)], axis=-1))

    total = box_integral(ex.f_D, ex.darcy_box) + box_integral(on_sigma, sigma_box)
    assert abs(total) < 1e-10


def test_3d_pressure_gradient_vanishes_on_walls():
    ex = paper_solution_3d()
    x = rand_points(ex.darcy_box)
    x[:, 0] = 0.0
    assert np.abs(ex.grad_p_D(x)[:, 0]).max() < 1e-14


def test_desk_normalization_constant():
    assert desk_solution_2d().p_D0 == pytest.approx(1 / 30, rel=1e-12)


def test_unknown_solution():
    with pytest.raises(ValueError):
        get_solution("nope")


def _interpolant(spaces, ex):
    return SimpleNamespace(
        u_S=spaces.stokes_velocity.interpolate(ex.u_S), u_D=spaces.darcy_velocity.interpolate(ex.u_D),
        p_S=spaces.stokes_pressure.interpolate(ex.p_S), p_D=spaces.darcy_pressure.interpolate(ex.p_D), delta=0.0)


def test_errors_vanish_for_represented_fields():
    mp = build_pair(2, n_stokes=4, n_darcy=4)
    spaces = build_spaces("mini-rt0", mp.stokes_mesh, mp.darcy_mesh)
    ex = desk_solution_2d()
    sol = _interpolant(spaces, ex)
    const = SimpleNamespace(**{**ex.__dict__})
    const.u_D = lambda x: np.broadcast_to([0.3, -1.2], x.shape).copy()
    const.div_u_D = lambda x: np.zeros(x.shape[:-1])
    sol.u_D = spaces.darcy_velocity.interpolate(const.u_D)
    const.u_S, const.grad_u_S, const.p_S, const.p_D = ex.u_S, ex.grad_u_S, ex.p_S, ex.p_D
    rep = compute_errors(sol, const, spaces)
    assert rep.e_uD < 1e-13
    assert min(rep.e_uS, rep.e_pS, rep.e_pD) > 0


def test_interpolation_error_below_discretization_error():
    mp = build_pair(2, n_stokes=8, n_darcy=8)
    spaces = build_spaces("mini-rt0", mp.stokes_mesh, mp.darcy_mesh)
    ex = desk_solution_2d()
    system = assemble_system(spaces, ProblemCoefficients.from_exact(ex))
    sol = solve(system)
    e_fe = compute_errors(sol, ex, spaces, n_dofs=system.n_dofs)
    e_int = compute_errors(_interpolant(spaces, ex), ex, spaces)
    assert e_fe.N == system.n_dofs
    # RT0 interpolant is the best H(div) approximation up to a constant
    assert e_int.e_uD <= 1.05 * e_fe.e_uD


def test_darcy_velocity_error_halves():
    ex = desk_solution_2d()
    errs = []
    for n in (8, 16):
        mp = build_pair(2, n_stokes=n, n_darcy=n)
        spaces = build_spaces("mini-rt0", mp.stokes_mesh, mp.darcy_mesh)
        sol = solve(assemble_system(spaces, ProblemCoefficients.from_exact(ex)))
        errs.append(compute_errors(sol, ex, spaces).e_uD)
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)
