import numpy as np
import pytest
import scipy.sparse as sp

from stokesdarcy.assembly import (CompatibilityWarning, ProblemCoefficients, assemble_system, check_compatibility,
                                  divergence_block, dump_system, integrate, read_system, scalar_mass, stokes_viscous)
from stokesdarcy.mesh import build_pair
from stokesdarcy.mms import desk_solution_2d
from stokesdarcy.solver import solve
from stokesdarcy.spaces import build_spaces

PAIRS_2D = ["mini-rt0", "mini-bdm1", "th2-rt1", "th2-bdm2", "ccr-bdm2", "br-rt0", "br-bdm1"]


def make(pair, dim=2, ns=4, nd=4):
    mp = build_pair(dim, n_stokes=ns, n_darcy=nd)
    return build_spaces(pair, mp.stokes_mesh, mp.darcy_mesh)


@pytest.mark.parametrize("pair", PAIRS_2D)
def test_reduced_matrix_symmetric(pair):
    system = assemble_system(make(pair, ns=4, nd=6), ProblemCoefficients.from_exact(desk_solution_2d()))
    A = system.matrix
    assert abs(A - A.T).max() <= 1e-13 * abs(A).max()


@pytest.mark.parametrize("pair,dim", [("mini-rt0", 2), ("br-bdm1", 2), ("mini-bdm1", 3), ("br-rt0", 3)])
def test_zero_data_gives_zero_solution(pair, dim):
    spaces = make(pair, dim, 2, 4) if dim == 3 else make(pair, dim, 4, 6)
    sol = solve(assemble_system(spaces, ProblemCoefficients()))
    for x in (sol.u_S, sol.u_D, sol.p_S, sol.p_D):
        assert np.abs(x).max(initial=0.0) == 0.0
    assert sol.delta == 0.0


def test_viscous_block_kernel_is_rigid_motions():
    spaces = make("mini-rt0", ns=4)
    A = stokes_viscous(spaces.stokes_velocity, nu=1.0)
    V = spaces.stokes_velocity
    rigid = [lambda x: np.stack([np.ones_like(x[..., 0]), 0 * x[..., 0]], -1),
             lambda x: np.stack([-x[..., 1], x[..., 0]], -1)]
    for f in rigid:
        v = V.interpolate(f)
        assert np.abs(A @ v).max() < 1e-12
    v = V.interpolate(lambda x: np.stack([x[..., 0], 0 * x[..., 0]], -1))
    # eps(u) = e1 e1^T with nu = 1 on the Stokes box of area 1/2: 2 (eps, eps) = 1
    assert v @ A @ v == pytest.approx(1.0, rel=1e-12)


def test_divergence_block_against_integral():
    spaces = make("th2-rt1", ns=4)
    B = divergence_block(spaces.darcy_velocity, spaces.darcy_pressure)
    u = spaces.darcy_velocity.interpolate(lambda x: np.stack([x[..., 0] ** 2, x[..., 0] * x[..., 1]], -1))
    ones = spaces.darcy_pressure.interpolate(lambda x: np.ones(x.shape[:-1]))
    # div u = 3 x on (0,1) x (0,0.5): integral 3/4
    assert ones @ (B @ u) == pytest.approx(0.75, rel=1e-12)


def test_scalar_mass_total():
    spaces = make("mini-rt0")
    M = scalar_mass(spaces.stokes_pressure)
    one = np.ones(spaces.stokes_pressure.n_dofs)
    assert one @ M @ one == pytest.approx(0.5, rel=1e-13)
    assert sp.issparse(M)


def test_integrate_box():
    mp = build_pair(2, n_stokes=4, n_darcy=4)
    assert integrate(mp.darcy_mesh, lambda x: x[..., 0] * x[..., 1], 4) == pytest.approx(1 / 16, rel=1e-13)


def test_dump_and_read_roundtrip(tmp_path):
    system = assemble_system(make("mini-rt0"), ProblemCoefficients.from_exact(desk_solution_2d()))
    path = tmp_path / "system.txt"
    dump_system(system, path)
    A, rhs = read_system(path)
    assert abs(A - system.matrix).max() == 0.0
    assert np.array_equal(rhs, system.rhs)
    assert path.read_text().splitlines()[0].startswith("#")
    dump_system(system, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_incompatible_data_warns():
    ex = desk_solution_2d()
    coef = ProblemCoefficients(ex.nu, ex.kappa, ex.K, ex.f_S, lambda x: np.ones(x.shape[:-1]), None, None)
    with pytest.warns(CompatibilityWarning):
        check_compatibility(make("mini-rt0"), coef)


def test_compatible_data_silent():
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error", CompatibilityWarning)
        check_compatibility(make("mini-rt0", ns=8, nd=8), ProblemCoefficients.from_exact(desk_solution_2d()))


def test_coefficients_validated():
    with pytest.raises(ValueError):
        ProblemCoefficients(nu=0.0)
    with pytest.raises(ValueError):
        ProblemCoefficients(kappa=-1.0)
