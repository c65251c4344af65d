"""Command line interface: ``python -m stokesdarcy {solve,study,infsup}``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from . import harness
from .assembly import CompatibilityWarning
from .spaces import PAIRS, get_pair

RESIDUAL_TOL = 1e-8


def _level(text: str) -> list[str]:
    """``1/8`` (both sides) or ``1/8:1/16`` (Stokes:Darcy)."""
    parts = text.split(":")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"level {text!r} is not h or h_S:h_D")
    for p in parts:
        try:
            harness.parse_h(p)
        except (ValueError, ZeroDivisionError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parts


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"override {text!r} is not KEY=VALUE")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="preset name or JSON config file")
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--pair", choices=sorted(PAIRS))
    p.add_argument("--solution", choices=("desk_2d", "paper_3d"))
    p.add_argument("--levels", nargs="+", type=_level, metavar="H[:H_D]",
                   help="mesh sizes, e.g. 1/8 1/16 or 1/6:1/12 1/10:1/20")
    p.add_argument("--backend", choices=("auto", "pardiso", "superlu"))
    p.add_argument("--nu", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--K", type=float, help="scalar permeability, K = value * I")
    p.add_argument("--sigma-bubbles", action="store_true", default=None,
                   help="keep Bernardi-Raugel face bubbles on the interface")
    p.add_argument("--allow-fine", action="store_true", default=None,
                   help="permit 3D levels finer than h_S = 1/10")
    p.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="KEY=VALUE", help="override any config key (VALUE parsed as JSON)")
    p.add_argument("--check", action="store_true", help="exit with status 1 on any tolerance breach")
    p.add_argument("-q", "--quiet", action="store_true")


def build_config(args: argparse.Namespace, **extra) -> harness.StudyConfig:
    """Start from the preset or file (or defaults) and apply flag overrides."""
    data = harness.load_preset(args.config).to_dict() if args.config else {}
    if args.config and "name" not in data:
        data["name"] = args.config
    for key in ("dim", "pair", "solution", "levels", "backend", "sigma_bubbles", "allow_fine"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.dim is not None and args.solution is None and not args.config:
        data["solution"] = "paper_3d" if args.dim == 3 else "desk_2d"
    if args.dim == 3 and args.levels is None and not args.config:
        data["levels"] = [["1/6", "1/12"], ["1/10", "1/20"]]
    coef = dict(data.get("coefficients", {}))
    for key in ("nu", "kappa", "K"):
        if getattr(args, key) is not None:
            coef[key] = getattr(args, key)
    data["coefficients"] = coef
    for key, value in args.overrides:
        data[key] = value
    data.update(extra)
    return harness.StudyConfig.from_dict(data)


def _say(args, *msg) -> None:
    if not args.quiet:
        print(*msg)


def cmd_solve(args) -> int:
    cfg = build_config(args)
    idx = args.level if args.level >= 0 else len(cfg.levels) + args.level
    if not 0 <= idx < len(cfg.levels):
        raise ValueError(f"level {args.level} out of range for {len(cfg.levels)} levels")
    res = harness.run_level(cfg, idx)
    e, rep = res.errors, res.report
    out = {"pair": cfg.pair, "dim": cfg.dim, "h_S": str(cfg.levels[idx][0]), "h_D": str(cfg.levels[idx][1]),
           "interface": rep["interface"], "N": e.N,
           **{k: getattr(e, k) for k in ("e_uS", "e_uD", "e_pS", "e_pD")},
           "consistency": res.consistency, "beta_h": res.beta_h,
           **{k: rep[k] for k in ("backend", "residual", "kkt_residual", "constraint_residual")}}
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        for k, v in out.items():
            _say(args, f"{k:>20}: {v:.6e}" if isinstance(v, float) else f"{k:>20}: {v}")
    breaches = []
    if args.check:
        for k in ("residual", "kkt_residual"):
            if not rep[k] <= RESIDUAL_TOL:
                breaches.append(f"{k} {rep[k]:.2e} > {RESIDUAL_TOL:.0e}")
        if not rep["constraint_residual"] <= 1e-10:
            breaches.append(f"constraint residual {rep['constraint_residual']:.2e} > 1e-10")
    return _finish(breaches)


def cmd_study(args) -> int:
    if args.list:
        print("\n".join(harness.preset_names()))
        return 0
    cfg = build_config(args)
    for key in ("csv", "markdown", "plot"):
        if getattr(args, key) is not None:
            setattr(cfg, key, getattr(args, key))
    if args.tolerance is not None:
        cfg.tolerance = args.tolerance
    record = harness.run_study(cfg, log=None if args.quiet else print)
    for fmt in ("csv", "markdown", "plot"):
        path = getattr(cfg, fmt)
        if path:
            harness.emit(record, fmt, path)
    _say(args, harness.to_markdown(record))
    if len(record.levels) > 1:
        _say(args, "least-squares slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in record.slopes().items()))
    return _finish(harness.check_record(record, RESIDUAL_TOL) if args.check else [])


def cmd_infsup(args) -> int:
    if args.levels is None and not args.config:
        args.levels = [_level(h) for h in ("1/4", "1/8", "1/16")]
    cfg = build_config(args, infsup=True)
    reports = harness.infsup_scan(cfg, log=None if args.quiet else print)
    breaches = []
    if args.check and len(reports) > 1:
        if get_pair(cfg.pair).stable:
            betas = [r.beta for r in reports]
            ratio = min(betas[1:]) / betas[0]
            if not ratio >= args.min_ratio:
                breaches.append(f"beta_h fell to {ratio:.3f} of its coarsest value (< {args.min_ratio})")
        else:
            # exact spurious modes pin beta_h at 0; the decay shows on their complement
            betas = [r.beta_reduced for r in reports]
            ratio = betas[-1] / betas[0]
            if not ratio <= args.max_unstable_ratio:
                breaches.append(f"unstable pair kept {ratio:.3f} of beta_h (> {args.max_unstable_ratio})")
    return _finish(breaches)


def _finish(breaches: list[str]) -> int:
    for b in breaches:
        print(f"CHECK FAILED: {b}", file=sys.stderr)
    return 1 if breaches else 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m stokesdarcy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one mesh level and report errors")
    _common(p)
    p.add_argument("--level", type=int, default=-1, help="level index into the sequence (default: last)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("study", help="run a convergence study and emit rate tables")
    _common(p)
    p.add_argument("--csv")
    p.add_argument("--markdown")
    p.add_argument("--plot", help="plot data file (N against errors)")
    p.add_argument("--tolerance", type=float, help="tolerance on the expected rates")
    p.add_argument("--list", action="store_true", help="list shipped presets")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("infsup", help="discrete inf-sup constant over a mesh sequence")
    _common(p)
    p.add_argument("--min-ratio", type=float, default=0.8,
                   help="stable pairs: least allowed beta_h relative to the coarsest level")
    p.add_argument("--max-unstable-ratio", type=float, default=0.5,
                   help="unstable pairs: largest allowed final beta_h relative to the coarsest level")
    p.set_defaults(func=cmd_infsup)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.quiet:
        warnings.simplefilter("ignore", CompatibilityWarning)
    try:
        return args.func(args)
    except (ValueError, harness.StudyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
