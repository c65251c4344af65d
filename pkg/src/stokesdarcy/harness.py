"""Convergence studies: run a mesh sequence, compute rates, write tables."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .assembly import ProblemCoefficients, assemble_system
from .coupling import darcy_trace_space, projection_residual
from .mesh import build_pair
from .mms import ErrorReport, compute_errors, get_solution
from .refelem import quadrature
from .solver import estimate_infsup, solve
from .spaces import build_spaces, facet_rule, get_pair

STAGES = ("mesh", "spaces", "assembly", "solve", "errors", "infsup")
ERROR_KEYS = ("uS", "uD", "pS", "pD")
CSV_COLUMNS = ("level", "h_S", "h_D", "N", "e_uS", "r_uS", "e_uD", "r_uD",
               "e_pS", "r_pS", "e_pD", "r_pD", "beta_h", "consistency")
H3D_CAP = Fraction(1, 10)


class StudyError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``level`` locate it."""

    def __init__(self, stage: str, level: int, cause: BaseException):
        super().__init__(f"[{stage}] level {level}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.level = level
        self.cause = cause


def rate(e: float, e_next: float, h: float, h_next: float) -> float:
    """Experimental order ``log(e / e') / log(h / h')``."""
    if min(e, e_next, h, h_next) <= 0:
        raise ValueError("errors and mesh sizes must be positive")
    if h == h_next:
        raise ValueError("mesh sizes must differ")
    return math.log(e / e_next) / math.log(h / h_next)


def parse_h(value) -> Fraction:
    """Accept ``1/8``, ``"1/8"``, ``0.125`` or a cell count ``8``."""
    if isinstance(value, str):
        f = Fraction(value.strip())
    elif isinstance(value, int):
        f = Fraction(1, value)
    else:
        f = Fraction(value).limit_denominator(10_000)
    if f <= 0:
        raise ValueError(f"mesh size must be positive, got {value!r}")
    if f > 1:
        f = 1 / f
    if f.numerator != 1:
        raise ValueError(f"mesh size {value!r} is not the reciprocal of a cell count")
    return f


@dataclass
class StudyConfig:
    """Settings of one convergence study.

    ``levels`` lists ``(h_S, h_D)``; each side uses a structured mesh of the
    unit box with ``1/h`` cells per axis.  ``coefficients`` may override
    ``nu``, ``kappa`` and a scalar ``K``.  ``expected`` maps rate names such
    as ``r_uS`` to reference values checked at the last level with
    ``tolerance``.
    """

    dim: int = 2
    pair: str = "mini-rt0"
    levels: list = field(default_factory=lambda: [["1/8", "1/8"], ["1/16", "1/16"], ["1/32", "1/32"]])
    solution: str = "desk_2d"
    coefficients: dict = field(default_factory=dict)
    infsup: bool = False
    sigma_bubbles: bool = False
    backend: str = "auto"
    quadrature_degree: int | None = None
    allow_fine: bool = False
    expected: dict = field(default_factory=dict)
    tolerance: float = 0.05
    min_slopes: dict = field(default_factory=dict)
    csv: str | None = None
    markdown: str | None = None
    plot: str | None = None
    name: str = ""

    def __post_init__(self):
        self.levels = [tuple(parse_h(h) for h in lv) for lv in self.levels]
        if not self.levels:
            raise ValueError("a study needs at least one level")
        if any(len(lv) != 2 for lv in self.levels):
            raise ValueError("each level is a pair (h_S, h_D)")
        pair = get_pair(self.pair)
        if self.dim not in pair.dims:
            raise ValueError(f"pair {self.pair!r} is not available in {self.dim}D")
        if self.dim == 3 and not self.allow_fine:
            fine = [lv for lv in self.levels if lv[0] < H3D_CAP]
            if fine:
                raise ValueError(f"3D levels finer than h_S = {H3D_CAP} need allow_fine")

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "StudyConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        cfg.name = cfg.name or path.stem
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [[str(h) for h in lv] for lv in self.levels]
        return d


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("stokesdarcy.presets").iterdir()
                  if p.name.endswith(".json"))


def load_preset(name: str) -> StudyConfig:
    """Load a shipped preset by name or a config file by path."""
    if Path(name).suffix == ".json" and Path(name).exists():
        return StudyConfig.load(name)
    res = resources.files("stokesdarcy.presets") / f"{name}.json"
    if not res.is_file():
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    cfg = StudyConfig.from_dict(json.loads(res.read_text()))
    cfg.name = cfg.name or name
    return cfg


@dataclass
class LevelResult:
    errors: ErrorReport
    beta_h: float | None
    consistency: float
    report: dict


@dataclass
class StudyRecord:
    config: StudyConfig
    levels: list[LevelResult]
    rates: list[dict]

    def rows(self) -> list[dict]:
        out = []
        for i, (lv, lr) in enumerate(zip(self.config.levels, self.levels)):
            e = lr.errors
            row = {"level": i, "h_S": lv[0], "h_D": lv[1], "N": e.N}
            for k in ERROR_KEYS:
                row[f"e_{k}"] = getattr(e, f"e_{k}")
                row[f"r_{k}"] = self.rates[i - 1][f"r_{k}"] if i > 0 else None
            row["beta_h"] = lr.beta_h
            row["consistency"] = lr.consistency
            out.append(row)
        return out

    def slopes(self) -> dict:
        """Least-squares slopes of ``log e`` against ``log h`` over all levels."""
        out = {}
        hS = np.log([float(lv[0]) for lv in self.config.levels])
        hD = np.log([float(lv[1]) for lv in self.config.levels])
        for k in ERROR_KEYS:
            h = hS if k.endswith("S") else hD
            e = np.log([getattr(lr.errors, f"e_{k}") for lr in self.levels])
            out[k] = float(np.polyfit(h, e, 1)[0]) if len(e) > 1 else float("nan")
        if len(self.levels) > 1:
            c = np.log([lr.consistency for lr in self.levels])
            out["consistency"] = float(np.polyfit(hD, c, 1)[0])
        return out


def _solution(cfg: StudyConfig):
    co = dict(cfg.coefficients)
    kw = {}
    if "nu" in co:
        kw["nu"] = float(co.pop("nu"))
    if "kappa" in co:
        kw["kappa"] = float(co.pop("kappa"))
    if "K" in co:
        kw["K"] = float(co.pop("K")) * np.eye(cfg.dim)
    if co:
        raise ValueError(f"unknown coefficient overrides: {sorted(co)}")
    ex = get_solution(cfg.solution, **kw)
    if ex.dim != cfg.dim:
        raise ValueError(f"solution {cfg.solution!r} is {ex.dim}D but the study is {cfg.dim}D")
    return ex


def run_level(cfg: StudyConfig, index: int, exact=None, log=None) -> LevelResult:
    """Mesh, spaces, coupling, assembly, solve and errors for one level."""
    exact = exact if exact is not None else _solution(cfg)
    h_S, h_D = cfg.levels[index]
    stage = "mesh"
    timings = {}
    try:
        t = time.perf_counter()
        pair = build_pair(cfg.dim, n_stokes=h_S.denominator, n_darcy=h_D.denominator)
        timings[stage] = time.perf_counter() - t
        stage = "spaces"
        t = time.perf_counter()
        spaces = build_spaces(cfg.pair, pair.stokes_mesh, pair.darcy_mesh, sigma_bubbles=cfg.sigma_bubbles)
        timings[stage] = time.perf_counter() - t
        stage = "assembly"
        t = time.perf_counter()
        system = assemble_system(spaces, ProblemCoefficients.from_exact(exact))
        timings[stage] = time.perf_counter() - t
        stage = "solve"
        t = time.perf_counter()
        sol = solve(system, backend=cfg.backend)
        timings[stage] = time.perf_counter() - t
        stage = "errors"
        t = time.perf_counter()
        err = compute_errors(sol, exact, spaces, cfg.quadrature_degree, n_dofs=system.n_dofs)
        err.h_S, err.h_D = float(h_S), float(h_D)
        cons = projection_residual(exact.p_D, darcy_trace_space(spaces.darcy_velocity))
        timings[stage] = time.perf_counter() - t
        beta = None
        if cfg.infsup:
            stage = "infsup"
            beta = estimate_infsup(system).beta
    except Exception as exc:
        raise StudyError(stage, index, exc) from exc
    report = dict(sol.report, interface=pair.interface_relation, timings=timings)
    if log is not None:
        log(f"level {index}: h_S={h_S} h_D={h_D} N={err.N} "
            + " ".join(f"e_{k}={getattr(err, 'e_' + k):.4e}" for k in ERROR_KEYS)
            + f" residual={sol.report['residual']:.1e}")
    return LevelResult(err, beta, cons, report)


def infsup_scan(cfg: StudyConfig, log=None) -> list:
    """Inf-sup reports for every level; the systems are assembled, not solved."""
    exact = _solution(cfg)
    out = []
    for i, (h_S, h_D) in enumerate(cfg.levels):
        stage = "mesh"
        try:
            pair = build_pair(cfg.dim, n_stokes=h_S.denominator, n_darcy=h_D.denominator)
            stage = "spaces"
            spaces = build_spaces(cfg.pair, pair.stokes_mesh, pair.darcy_mesh, sigma_bubbles=cfg.sigma_bubbles)
            stage = "assembly"
            system = assemble_system(spaces, ProblemCoefficients.from_exact(exact))
            stage = "infsup"
            rep = estimate_infsup(system)
        except Exception as exc:
            raise StudyError(stage, i, exc) from exc
        if log is not None:
            log(f"h_S={h_S} h_D={h_D} beta_h={rep.beta:.6f} spurious={rep.n_spurious} "
                f"beta_reduced={rep.beta_reduced:.6f}")
        out.append(rep)
    return out


def run_study(cfg: StudyConfig, log=None) -> StudyRecord:
    """Run every level of ``cfg`` in order and compute consecutive rates."""
    exact = _solution(cfg)
    results = [run_level(cfg, i, exact, log) for i in range(len(cfg.levels))]
    rates = []
    for a, b in zip(results, results[1:]):
        r = {}
        for k in ERROR_KEYS:
            hk = "h_S" if k.endswith("S") else "h_D"
            r[f"r_{k}"] = rate(getattr(a.errors, f"e_{k}"), getattr(b.errors, f"e_{k}"),
                               getattr(a.errors, hk), getattr(b.errors, hk))
        rates.append(r)
    return StudyRecord(cfg, results, rates)


# ---------------------------------------------------------------------------
# discrete conservation diagnostics


def interface_fluxes(solution, spaces, degree: int | None = None) -> tuple[float, float]:
    """Total normal fluxes ``(<u_D . nu, 1>, <u_S . nu, 1>)`` across the interface."""
    out = []
    for space, coeffs in ((spaces.darcy_velocity, solution.u_D), (spaces.stokes_velocity, solution.u_S)):
        mesh = space.mesh
        deg = degree if degree is not None else space.poly_degree + 1
        facets = mesh.sigma_facets()
        pts, w = facet_rule(mesh, facets, deg)
        cells = mesh.facet_cells[facets, 0]
        vals = space.evaluate(coeffs, cells, mesh.affine_maps(cells).pull(pts)).values
        out.append(float(np.sum(w * (vals @ mesh.interface.normal(mesh.dim)))))
    return out[0], out[1]


def darcy_divergence(solution, spaces, f_D=None, degree: int = 4) -> float:
    """Largest ``|div u_D - f_D|`` over the quadrature points of every Darcy cell."""
    space = spaces.darcy_velocity
    mesh = space.mesh
    rule = quadrature(mesh.dim, degree)
    worst = 0.0
    for cells in np.array_split(np.arange(mesh.n_cells), max(1, mesh.n_cells // 4096)):
        div = space.evaluate(solution.u_D, cells, rule.points).div
        if f_D is not None:
            div = div - f_D(mesh.affine_maps(cells).push(rule.points))
        worst = max(worst, float(np.abs(div).max(initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# output


def _fmt(v, digits: int = 6) -> str:
    if v is None:
        return "-"
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.{digits}e}"


def to_csv(record: StudyRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in record.rows():
        w.writerow([_fmt(row[c]) if not c.startswith("r_") else
                    ("-" if row[c] is None else f"{row[c]:.3f}") for c in CSV_COLUMNS])
    return buf.getvalue()


def to_markdown(record: StudyRecord) -> str:
    """Rate table with one row per level and ``-`` on the first row."""
    cfg = record.config
    head = ["h_S", "h_D", "N", "r(u_S)", "r(u_D)", "r(p_S)", "r(p_D)"]
    lines = [f"{cfg.pair}, {cfg.solution}, {cfg.dim}D", "",
             "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in record.rows():
        r = ["-" if row[f"r_{k}"] is None else f"{row[f'r_{k}']:.3f}" for k in ERROR_KEYS]
        lines.append(f"| {row['h_S']} | {row['h_D']} | {row['N']} | " + " | ".join(r) + " |")
    return "\n".join(lines) + "\n"


def to_plot_data(record: StudyRecord) -> str:
    """Whitespace-separated ``N e_uS e_uD e_pS e_pD`` for a log-log plot."""
    lines = ["# N e_uS e_uD e_pS e_pD"]
    for row in record.rows():
        lines.append(" ".join([str(row["N"])] + [_fmt(row[f"e_{k}"]) for k in ERROR_KEYS]))
    return "\n".join(lines) + "\n"


def emit(record: StudyRecord, fmt: str, path=None) -> str:
    """Render ``csv``, ``markdown`` or ``plot`` output and optionally write it."""
    render = {"csv": to_csv, "markdown": to_markdown, "plot": to_plot_data}
    if fmt not in render:
        raise ValueError(f"unknown format {fmt!r}; choose from {sorted(render)}")
    text = render[fmt](record)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# checks


def check_record(record: StudyRecord, residual_tol: float = 1e-8) -> list[str]:
    """Tolerance breaches of a finished study; empty when all checks pass.

    Checks the solver residual at every level, the expected rates of the last
    level within ``tolerance`` and least-squares slopes against
    ``min_slopes``.
    """
    cfg = record.config
    out = []
    for i, lr in enumerate(record.levels):
        if not lr.report["residual"] <= residual_tol:
            out.append(f"level {i}: residual {lr.report['residual']:.2e} > {residual_tol:.0e}")
    if cfg.expected:
        if not record.rates:
            out.append("expected rates need at least two levels")
        else:
            last = record.rates[-1]
            for key, ref in cfg.expected.items():
                if key not in last:
                    out.append(f"unknown expected rate {key!r}")
                elif not abs(last[key] - ref) <= cfg.tolerance:
                    out.append(f"{key} = {last[key]:.3f}, expected {ref:.3f} +- {cfg.tolerance}")
    if cfg.min_slopes:
        slopes = record.slopes()
        for key, lo in cfg.min_slopes.items():
            if key not in slopes:
                out.append(f"unknown slope {key!r}")
            elif not slopes[key] >= lo:
                out.append(f"slope {key} = {slopes[key]:.3f} < {lo}")
    return out
