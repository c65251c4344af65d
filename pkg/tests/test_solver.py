import numpy as np
import pytest

from stokesdarcy.assembly import ProblemCoefficients, assemble_system
from stokesdarcy.mesh import build_pair
from stokesdarcy.mms import desk_solution_2d
from stokesdarcy.solver import SingularSystemError, estimate_infsup, pardiso_available, solve
from stokesdarcy.spaces import build_spaces


def system_for(pair, ns=8, nd=8, dim=2, exact=None):
    mp = build_pair(dim, n_stokes=ns, n_darcy=nd)
    spaces = build_spaces(pair, mp.stokes_mesh, mp.darcy_mesh)
    return assemble_system(spaces, ProblemCoefficients.from_exact(exact or desk_solution_2d()))


def test_report_fields_and_residuals():
    sol = solve(system_for("mini-bdm1", 8, 12))
    rep = sol.report
    assert rep["residual"] < 1e-12
    assert rep["kkt_residual"] < 1e-10
    assert rep["constraint_residual"] < 1e-12
    assert abs(rep["mean_p_S"]) < 1e-12 and abs(rep["mean_p_D"]) < 1e-12
    assert rep["backend"] in ("pardiso", "superlu")


@pytest.mark.skipif(not pardiso_available(), reason="pypardiso/MKL not installed")
def test_backends_agree():
    system = system_for("br-rt0", 8, 12)
    a = solve(system, backend="superlu")
    b = solve(system, backend="pardiso")
    assert a.report["backend"] == "superlu" and b.report["backend"] == "pardiso"
    for k in ("u_S", "u_D", "p_S", "p_D"):
        assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-10)
    assert a.delta == pytest.approx(b.delta, abs=1e-10)


def test_unknown_backend():
    with pytest.raises(ValueError):
        solve(system_for("mini-rt0", 4, 4), backend="umfpack")


def test_unstable_pair_raises_singular():
    with pytest.raises(SingularSystemError) as info:
        solve(system_for("p1p1-rt0", 16, 16), backend="superlu")
    assert info.value.block == "pressure"


def test_unchecked_solve_reports_residual():
    system = system_for("mini-rt0", 4, 4)
    sol = solve(system, check=False, backend="superlu")
    assert sol.report["residual"] < 1e-12


@pytest.mark.parametrize("pair", ["mini-rt0", "br-rt0"])
def test_infsup_stable_pair(pair):
    rep = estimate_infsup(system_for(pair, 4, 4))
    assert rep.n_spurious == 0
    assert rep.beta == pytest.approx(rep.beta_reduced)
    assert 0.1 < rep.beta < 1.0
    assert rep.pair == pair


def test_infsup_detects_spurious_modes():
    rep = estimate_infsup(system_for("p1p1-rt0", 4, 4))
    assert rep.beta == 0.0
    assert rep.n_spurious > 0
    assert rep.beta_reduced > 0


def test_infsup_size_limit():
    with pytest.raises(ValueError):
        estimate_infsup(system_for("mini-rt0", 4, 4), max_pressure=10)
