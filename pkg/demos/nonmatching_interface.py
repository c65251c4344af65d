"""Solve once on interface grids that do not match and inspect the coupling.

The Darcy side is coarser than the Stokes side.  The jump of the normal flux
across the interface equals the prescribed datum ``<g_nu, 1>`` even though
the two grids differ.
"""

import numpy as np

from stokesdarcy.assembly import ProblemCoefficients, assemble_system, integrate_sigma
from stokesdarcy.harness import darcy_divergence, interface_fluxes
from stokesdarcy.mesh import build_pair
from stokesdarcy.mms import compute_errors, desk_solution_2d
from stokesdarcy.solver import solve
from stokesdarcy.spaces import build_spaces

exact = desk_solution_2d()
meshes = build_pair(2, n_stokes=24, n_darcy=10)
spaces = build_spaces("br-bdm1", meshes.stokes_mesh, meshes.darcy_mesh)
print("interface:", meshes.interface_relation)

system = assemble_system(spaces, ProblemCoefficients.from_exact(exact))
sol = solve(system)
flux_D, flux_S = interface_fluxes(sol, spaces)
g = integrate_sigma(meshes.darcy_mesh, exact.g_nu, 12)
print(f"flux jump {flux_D - flux_S:+.3e}  <g_nu, 1> {g:+.3e}")

err = compute_errors(sol, exact, spaces, n_dofs=system.n_dofs)
print("N =", err.N, {k: f"{getattr(err, k):.3e}" for k in ("e_uS", "e_uD", "e_pS", "e_pD")})
print("solver:", sol.report["backend"], f"residual {sol.report['residual']:.1e}",
      f"constraint {sol.report['constraint_residual']:.1e}")

# without Darcy source and interface data the discrete divergence vanishes cellwise
sol = solve(assemble_system(spaces, ProblemCoefficients.from_exact(exact, homogeneous=True)))
print(f"homogeneous data: max |div u_D| = {darcy_divergence(sol, spaces):.1e}, "
      f"max |u_D| = {np.abs(sol.u_D).max():.1e}")
