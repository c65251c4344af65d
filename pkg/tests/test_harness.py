import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stokesdarcy import harness
from stokesdarcy.assembly import ProblemCoefficients, assemble_system
from stokesdarcy.harness import StudyConfig, StudyError
from stokesdarcy.mesh import build_pair
from stokesdarcy.mms import desk_solution_2d
from stokesdarcy.solver import solve
from stokesdarcy.spaces import build_spaces


@pytest.fixture(scope="module")
def record():
    cfg = StudyConfig(pair="mini-rt0", levels=[["1/4", "1/4"], ["1/8", "1/8"], ["1/16", "1/16"]])
    return harness.run_study(cfg)


def test_rate_examples():
    assert harness.rate(0.1, 0.05, 1 / 8, 1 / 16) == pytest.approx(1.0)
    assert harness.rate(math.e, math.e, 0.5, 0.25) == 0.0
    assert harness.rate(0.2, 0.05, 0.5, 0.25) == pytest.approx(2.0)


@pytest.mark.parametrize("args", [(0.0, 0.1, 0.5, 0.25), (0.1, -1.0, 0.5, 0.25), (0.1, 0.1, 0.5, 0.5)])
def test_rate_rejects(args):
    with pytest.raises(ValueError):
        harness.rate(*args)


@given(st.floats(1e-8, 1e3), st.floats(-3.0, 3.0), st.integers(2, 64), st.integers(2, 4))
def test_rate_inverts_power_law(c, p, n, k):
    h, h2 = 1 / n, 1 / (k * n)
    assert harness.rate(c * h ** p, c * h2 ** p, h, h2) == pytest.approx(p, abs=1e-9)


@pytest.mark.parametrize("value,expected", [("1/8", Fraction(1, 8)), (8, Fraction(1, 8)),
                                            (0.125, Fraction(1, 8)), (" 1/20 ", Fraction(1, 20))])
def test_parse_h(value, expected):
    assert harness.parse_h(value) == expected


@pytest.mark.parametrize("value", ["2/7", "0", -4, "x"])
def test_parse_h_rejects(value):
    with pytest.raises((ValueError, ZeroDivisionError)):
        harness.parse_h(value)


def test_config_validation():
    with pytest.raises(ValueError):
        StudyConfig(levels=[])
    with pytest.raises(ValueError):
        StudyConfig.from_dict({"pair": "mini-rt0", "colour": "red"})
    with pytest.raises(ValueError):
        StudyConfig(dim=3, pair="th2-bdm2", levels=[["1/2", "1/2"]])
    with pytest.raises(ValueError, match="allow_fine"):
        StudyConfig(dim=3, solution="paper_3d", levels=[["1/12", "1/6"]])
    cfg = StudyConfig(dim=3, solution="paper_3d", levels=[["1/12", "1/6"]], allow_fine=True)
    assert cfg.levels == [(Fraction(1, 12), Fraction(1, 6))]


def test_config_roundtrip(tmp_path):
    cfg = harness.load_preset("mini-bdm1-3d-nested")
    path = tmp_path / "c.json"
    import json
    path.write_text(json.dumps(cfg.to_dict()))
    again = StudyConfig.load(path)
    assert again.levels == cfg.levels and again.expected == cfg.expected


def test_presets_load():
    names = harness.preset_names()
    assert "mini-rt0-2d" in names and "br-rt0-3d-reversed" in names
    for name in names:
        assert harness.load_preset(name).name == name
    with pytest.raises(ValueError):
        harness.load_preset("no-such-preset")


def test_record_rates_and_slopes(record):
    rows = record.rows()
    assert len(rows) == 3 and rows[0]["r_uS"] is None
    assert rows[1]["N"] < rows[2]["N"]
    s = record.slopes()
    assert s["uD"] == pytest.approx(1.0, abs=0.15)
    assert s["consistency"] == pytest.approx(1.0, abs=0.2)
    assert record.levels[-1].report["interface"] == "matching"


def test_csv_output(record, tmp_path):
    text = harness.to_csv(record)
    lines = text.strip().split("\n")
    assert lines[0].split(",") == list(harness.CSV_COLUMNS)
    assert len(lines) == 1 + 3
    first = dict(zip(harness.CSV_COLUMNS, lines[1].split(",")))
    assert all(first[f"r_{k}"] == "-" for k in harness.ERROR_KEYS)
    assert first["h_S"] == "1/4"
    harness.emit(record, "csv", tmp_path / "a.csv")
    harness.emit(record, "csv", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_markdown_and_plot(record):
    md = harness.emit(record, "markdown")
    assert md.count("\n| 1/") == 3
    assert "| 1/4 | 1/4 |" in md and " - | - | - | - |" in md
    plot = harness.emit(record, "plot").splitlines()
    assert plot[0].startswith("#") and len(plot) == 4
    with pytest.raises(ValueError):
        harness.emit(record, "xlsx")


def test_check_record(record):
    assert harness.check_record(record) == []
    record.config.expected = {"r_uD": 5.0}
    record.config.min_slopes = {"pS": 9.0, "bogus": 1.0}
    try:
        out = harness.check_record(record)
    finally:
        record.config.expected, record.config.min_slopes = {}, {}
    assert len(out) == 3


def test_study_error_names_stage(monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("boom")
    monkeypatch.setattr(harness, "solve", broken)
    with pytest.raises(StudyError) as info:
        harness.run_level(StudyConfig(levels=[["1/4", "1/4"]]), 0)
    assert info.value.stage == "solve" and info.value.level == 0
    assert "[solve]" in str(info.value)


def test_infsup_scan_and_level_beta():
    cfg = StudyConfig(pair="br-rt0", levels=[["1/4", "1/4"], ["1/8", "1/8"]], infsup=True)
    reps = harness.infsup_scan(cfg)
    assert len(reps) == 2 and all(r.beta > 0.2 for r in reps)
    assert harness.run_level(cfg, 0).beta_h == pytest.approx(reps[0].beta)


def _solved(pair, ns, nd, homogeneous):
    mp = build_pair(2, n_stokes=ns, n_darcy=nd)
    spaces = build_spaces(pair, mp.stokes_mesh, mp.darcy_mesh)
    coef = ProblemCoefficients.from_exact(desk_solution_2d(), homogeneous=homogeneous)
    return solve(assemble_system(spaces, coef)), spaces


def test_interface_fluxes_with_datum():
    ex = desk_solution_2d()
    sol, spaces = _solved("mini-bdm1", 8, 12, False)
    fd, fs = harness.interface_fluxes(sol, spaces)
    # integral of g_nu over the interface, by Gauss-Legendre
    t, w = np.polynomial.legendre.leggauss(20)
    x = np.stack([0.5 * (t + 1), np.full_like(t, 0.5)], -1)
    assert fd - fs == pytest.approx(0.5 * np.sum(w * ex.g_nu(x)), abs=1e-10)


def test_darcy_divergence_matches_projected_source():
    sol, spaces = _solved("mini-rt0", 8, 8, True)
    assert harness.darcy_divergence(sol, spaces) < 1e-10
    # RT0 divergence is the cell mean of f_D, so the pointwise mismatch is O(h)
    f_D = desk_solution_2d().f_D
    gaps = [harness.darcy_divergence(*_solved("mini-rt0", n, n, False), f_D) for n in (8, 16)]
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.2)
