"""Direct solution of the reduced system and a numerical inf-sup estimate."""

from __future__ import annotations

import glob
import os
import site
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import CoupledSystem, h1_gram, hdiv_gram, scalar_mass

RESIDUAL_TOL = 1e-10
BACKENDS = ("auto", "pardiso", "superlu")
_MKL_ENV = "PYPARDISO_MKL_RT"


class SingularSystemError(RuntimeError):
    """Raised when the factorization breaks down; ``block`` names the culprit."""

    def __init__(self, message: str, block: str):
        super().__init__(message)
        self.block = block


@dataclass
class SolutionFields:
    u_S: np.ndarray
    u_D: np.ndarray
    p_S: np.ndarray
    p_D: np.ndarray
    delta: float
    multipliers: np.ndarray
    report: dict = field(default_factory=dict)


def _factor(A: sp.spmatrix):
    return spla.splu(sp.csc_matrix(A), permc_spec="COLAMD")


def _locate_mkl_rt() -> str | None:
    """Search the usual install prefixes for the MKL runtime library."""
    prefixes = [sys.prefix, sys.base_prefix, site.USER_BASE, "/usr/local", "/usr"]
    prefixes += [os.path.dirname(os.path.dirname(os.path.dirname(d))) for d in site.getsitepackages()]
    for prefix in dict.fromkeys(p for p in prefixes if p):
        hits = sorted(glob.glob(os.path.join(prefix, "lib*", "libmkl_rt.so*")), key=len)
        if hits:
            return hits[0]
    return None


_PARDISO = None


def _pardiso_module():
    """Import pypardiso, pointing it at a discovered MKL runtime if needed.

    Returns ``None`` when the package or the runtime is unavailable.
    """
    global _PARDISO
    if _PARDISO is None:
        if _MKL_ENV not in os.environ:
            path = _locate_mkl_rt()
            if path is not None:
                os.environ[_MKL_ENV] = path
        try:
            import pypardiso
            _PARDISO = pypardiso
        except (ImportError, OSError):
            _PARDISO = False
    return _PARDISO or None


def pardiso_available() -> bool:
    return _pardiso_module() is not None


class _SuperLU:
    name = "superlu"

    def __init__(self, A: sp.spmatrix):
        self.lu = _factor(A)
        d = np.abs(self.lu.U.diagonal())
        self.pivot_ratio = float(d.min() / d.max()) if d.size else 1.0
        self.factor_nnz = int(self.lu.L.nnz + self.lu.U.nnz)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(b)


class _Pardiso:
    """Symmetric indefinite PARDISO factorization of the upper triangle."""

    name = "pardiso"

    def __init__(self, A: sp.spmatrix):
        mod = _pardiso_module()
        A = sp.coo_matrix(A)
        n = A.shape[0]
        keep = A.row <= A.col
        # PARDISO requires every diagonal entry to be stored, zeros included
        rows = np.concatenate([A.row[keep], np.arange(n)])
        cols = np.concatenate([A.col[keep], np.arange(n)])
        vals = np.concatenate([A.data[keep], np.zeros(n)])
        self.U = sp.csr_matrix((vals, (rows, cols)), shape=A.shape)
        self.U.sort_indices()
        self.solver = mod.PyPardisoSolver(mtype=-2)
        self.solver.set_phase(12)
        try:
            self.solver._call_pardiso(self.U, np.zeros((n, 1)))
        except mod.pardiso_wrapper.PyPardisoError as exc:
            raise RuntimeError(f"PARDISO factorization failed with code {exc.value}") from exc
        self.factor_nnz = int(self.solver.get_iparm(18))
        self.perturbed_pivots = int(self.solver.get_iparm(14))
        self.pivot_ratio = float("nan")

    def solve(self, b: np.ndarray) -> np.ndarray:
        self.solver.set_phase(33)
        x = self.solver._call_pardiso(self.U, np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 1))
        return np.asarray(x).ravel()

    def free(self):
        self.solver.free_memory(everything=True)


def _diagnose(system: CoupledSystem) -> SingularSystemError:
    rr = system.reduced_ranges
    u = slice(rr["u_S"].start, rr["u_D"].stop)
    A = system.matrix[u, u]
    try:
        lu = _factor(A)
        d = np.abs(lu.U.diagonal())
        bad_velocity = d.min() <= 1e-13 * d.max()
    except RuntimeError:
        bad_velocity = True
    if bad_velocity:
        return SingularSystemError(
            "velocity block is singular: check boundary conditions and interface constraints", "velocity")
    return SingularSystemError(
        "pressure coupling block is rank deficient: the element pair is not inf-sup stable", "pressure")


def _factorize(A: sp.spmatrix, backend: str):
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend == "auto":
        backend = "pardiso" if pardiso_available() else "superlu"
    if backend == "pardiso":
        if not pardiso_available():
            raise RuntimeError("the pardiso backend needs pypardiso and the MKL runtime")
        return _Pardiso(A)
    return _SuperLU(A)


def solve(system: CoupledSystem, check: bool = True, backend: str = "auto") -> SolutionFields:
    """Factor the reduced system and back-substitute.

    Parameters
    ----------
    system : CoupledSystem
    check : bool
        Raise :class:`SingularSystemError` when the residual after refinement
        exceeds ``1e-6`` or SuperLU reports a vanishing pivot.
    backend : {"auto", "pardiso", "superlu"}
        ``auto`` picks PARDISO when available.  A PARDISO solve that fails the
        residual check is retried with SuperLU before giving up.

    Notes
    -----
    The report holds relative residuals of the reduced and the full system,
    the constraint residual and the mean values of the pressures.
    """
    A = system.matrix
    bnorm = np.linalg.norm(system.rhs)

    def attempt(kind):
        t0 = time.perf_counter()
        try:
            fac = _factorize(A, kind)
        except RuntimeError as exc:
            if kind == "pardiso" and "needs pypardiso" in str(exc):
                raise
            raise _diagnose(system) from exc
        x = fac.solve(system.rhs)
        t1 = time.perf_counter()
        if np.all(np.isfinite(x)):
            # two steps of iterative refinement
            for _ in range(2):
                x = x + fac.solve(system.rhs - A @ x)
        r = system.rhs - A @ x
        rel = float(np.linalg.norm(r) / bnorm) if bnorm > 0 else float(np.linalg.norm(r))
        if not np.isfinite(rel):
            rel = np.inf
        if isinstance(fac, _Pardiso):
            fac.free()
        return fac, x, rel, t1 - t0

    fac, x, rel, tf = attempt(backend)
    if fac.name == "pardiso" and rel > 1e-6:
        fac, x, rel, tf = attempt("superlu")
    if check and (rel > 1e-6 or fac.pivot_ratio < 1e-14):
        raise _diagnose(system)

    xf = system.expand(x)
    # residual of the unreduced system, restricted to the constrained space
    rf = system.P.T @ (system.rhs_full - system.K_full @ xf)
    parts = system.split(xf)
    cons = system.coupling.constraints
    cres = parts["u_D"][cons.slave] - cons.apply(parts["u_S"])
    m_S, m_D = system.mean_functionals
    report = {
        "n": system.n,
        "nnz": system.matrix.nnz,
        "backend": fac.name,
        "residual": rel,
        "kkt_residual": float(np.linalg.norm(rf) / max(np.linalg.norm(system.P.T @ system.rhs_full), 1e-300)),
        "constraint_residual": float(np.abs(cres).max(initial=0.0)),
        "mean_p_S": float(m_S @ parts["p_S"]),
        "mean_p_D": float(m_D @ parts["p_D"]),
        "pivot_ratio": fac.pivot_ratio,
        "factor_nnz": fac.factor_nnz,
        "time_factor": tf,
    }
    return SolutionFields(parts["u_S"], parts["u_D"], parts["p_S"], parts["p_D"],
                          float(parts["delta"][0]), parts["mu"], report)


# ---------------------------------------------------------------------------
# inf-sup


@dataclass
class InfSupReport:
    """Discrete inf-sup data of one mesh level.

    ``beta`` is the inf-sup constant itself.  ``n_spurious`` counts pressure
    modes that the divergence cannot see (zero up to round-off) and
    ``beta_reduced`` is the constant on their orthogonal complement, which
    stays informative for unstable pairs with exact spurious modes.
    """

    beta: float
    h: float
    pair: str
    n_velocity: int
    n_pressure: int
    n_spurious: int = 0
    beta_reduced: float = float("nan")
    eigenvalues: np.ndarray = field(repr=False, default=None)


def velocity_gram(system: CoupledSystem) -> sp.csr_matrix:
    """Product-norm Gram: full H1 on the Stokes side, H(div) on the Darcy side."""
    sp_ = system.spaces
    return sp.block_diag([h1_gram(sp_.stokes_velocity), hdiv_gram(sp_.darcy_velocity)]).tocsr()


def pressure_gram(system: CoupledSystem, delta_weight: float = 1.0) -> sp.csr_matrix:
    """L2 masses of ``p_S`` and ``p_D`` plus ``delta_weight |delta|^2``."""
    sp_ = system.spaces
    return sp.block_diag([scalar_mass(sp_.stokes_pressure), scalar_mass(sp_.darcy_pressure),
                          sp.csr_matrix([[delta_weight]])]).tocsr()


def estimate_infsup(system: CoupledSystem, X: sp.spmatrix | None = None, Q: sp.spmatrix | None = None,
                    max_pressure: int = 5000, spurious_tol: float = 1e-6) -> InfSupReport:
    """Smallest generalized singular value of the reduced divergence block.

    Solves ``Z^T B X^-1 B^T Z y = lambda Z^T Q Z y`` with ``Z`` spanning the
    pressures that satisfy both mean constraints, and returns
    ``beta = sqrt(lambda_min)``.  Singular values below ``spurious_tol``
    times the largest one count as spurious modes.
    """
    X = velocity_gram(system) if X is None else X
    Q = pressure_gram(system) if Q is None else Q
    rg, rr = system.ranges, system.reduced_ranges
    ufull = slice(rg["u_S"].start, rg["u_D"].stop)
    pfull = slice(rg["p_S"].start, rg["delta"].stop)
    ured = slice(rr["u_S"].start, rr["u_D"].stop)
    pred = slice(rr["p_S"].start, rr["delta"].stop)
    npr = pred.stop - pred.start
    if npr > max_pressure:
        raise ValueError(f"inf-sup estimate limited to {max_pressure} pressure unknowns (got {npr})")
    Pu = system.P[ufull, ured]
    Xr = (Pu.T @ X @ Pu).tocsc()
    Br = -system.matrix[pred, ured]
    Mr = system.matrix[rr["mu"], pred].toarray()
    Z = sla.null_space(Mr)
    Qr = (system.P[pfull, pred].T @ Q @ system.P[pfull, pred]).toarray()
    BtZ = (Br.T @ Z)
    lu = spla.splu(Xr)
    S = BtZ.T @ lu.solve(np.asarray(BtZ))
    S = 0.5 * (S + S.T)
    Qz = Z.T @ Qr @ Z
    lam = sla.eigh(S, 0.5 * (Qz + Qz.T), eigvals_only=True)
    sv = np.sqrt(np.clip(lam, 0.0, None))
    zero = sv <= spurious_tol * sv[-1]
    n_zero = int(zero.sum())
    beta = 0.0 if n_zero else float(sv[0])
    beta_red = float(sv[n_zero]) if n_zero < sv.size else 0.0
    return InfSupReport(beta, max(system.spaces.stokes_mesh.h, system.spaces.darcy_mesh.h),
                        system.spaces.pair.name, ured.stop - ured.start, npr, n_zero, beta_red, lam)
