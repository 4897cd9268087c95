"""Command-line entry point: ``flowforge <subcommand> ...``.

Exit codes: 0 success, 1 domain error, 2 resource cap, 3 numeric failure.
Every file is written atomically (temporary file, then rename).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from ._util import atomic_write, fmt_rational, parse_rational
from .errors import DomainError, FlowforgeError

UNITS = """units:
  alpha, iota     exact rationals, written "p/q" (e.g. 1/2) or as integers
  mu, eps         rationals "p/q" or decimals (e.g. 1/8 or 0.125)
  grid sizes      integers (points per unit length, a power of two)
  dt, T           decimals in the time unit of the unit torus"""


class _Parser(argparse.ArgumentParser):
    """Argument errors become domain errors (exit 1) instead of argparse's exit 2."""

    def error(self, message):
        raise DomainError(f"{self.prog}: {message}")


def _rational(text):
    try:
        return parse_rational(text)
    except DomainError as exc:
        raise argparse.ArgumentTypeError(f"{exc} (expected \"p/q\")") from None


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _scale_list(text) -> list[float]:
    try:
        vals = [float(parse_rational(t)) for t in str(text).replace(",", " ").split()]
    except DomainError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list of scales")
    return vals


def _params(args):
    from .multiindex import derive_params

    return derive_params(args.alpha, args.n, args.iota)


def _clean(obj):
    """Replace non-finite floats by None so the JSON is strict."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(text: str, out) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_params(args) -> int:
    p = _params(args)
    if args.format == "json":
        _emit(_dump(p.as_dict()), args.out)
    else:
        lines = [f"Gamma={p.gamma}", f"delta={fmt_rational(p.delta)}", f"kappa0={fmt_rational(p.kappa0)}"]
        if p.diverging_variance:
            lines.append("warning: alpha <= 1/4 at n = 1, higher-order noise variances diverge")
        _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_enumerate(args) -> int:
    from .multiindex import canonical_json, enumerate_indices, scaling

    p = _params(args)
    items = enumerate_indices(p, args.k, cap=args.cap)
    if args.format == "json":
        _emit(canonical_json(items) + "\n", args.out)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a_json", "order", "size", "scaling"])
        for a in items:
            w.writerow([a.to_json(), a.order, a.size, fmt_rational(scaling(a, p.alpha))])
        _emit(buf.getvalue(), args.out)
    return 0


def cmd_flow(args) -> int:
    from .flowgen import build_hierarchy

    h = build_hierarchy(_params(args), args.max_order, cap=args.cap)
    _emit(h.to_json() + "\n", args.out)
    return 0


def cmd_counterterms(args) -> int:
    from .renorm import counterterms_csv, enumerate_relevant

    _emit(counterterms_csv(enumerate_relevant(_params(args), args.max_order)), args.out)
    return 0


def cmd_cumulants(args) -> int:
    from .cumulant import classify_cumulants

    rep = classify_cumulants(_params(args), args.pmax, args.order_cap)
    _emit(_dump(rep.to_json_obj()), args.out)
    if not rep.paper_consistent:
        print(f"note: {len(rep.violations)} relevant cumulant list(s) outside the expected classes",
              file=sys.stderr)
    return 0


def cmd_kernels_verify(args) -> int:
    from .kernels import DEFAULT_MUS, GridSpec, default_estimate_grid, verify_estimates

    p = _params(args)
    mus = tuple(args.mus) if args.mus else DEFAULT_MUS
    grid = default_estimate_grid(p.n, args.grid, mus)
    if args.dt is not None:
        grid = GridSpec(p.n, args.grid, 0.0, grid.T1, args.dt)
    rep = verify_estimates(p, grid, mus=mus)
    if args.out_dir:
        out = Path(args.out_dir)
        rep.write(out / "estimates.csv")
        atomic_write(out / "checks.json", _dump({"checks": rep.checks, "notes": rep.notes}))
        if not args.no_plots:
            from .plotting import plot_estimates

            plot_estimates(rep, out / "plots" / "estimates.svg")
    else:
        sys.stdout.write(rep.to_csv())
    return 0


SIM_KEYS = {"alpha", "n", "iota", "grid", "dt", "t", "eps_ladder", "seed", "b", "d", "g", "h",
            "counterterm_mode", "mc_samples", "sign", "snapshots", "blowup_bound", "initial"}


def read_sim_config(path) -> dict[str, str]:
    """Key-value text (``key = value`` per line, ``#`` comments); keys are case-insensitive."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DomainError(f"cannot read config {path}: {exc}") from exc
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string("[simulate]\n" + text)
    except configparser.Error as exc:
        raise DomainError(f"malformed config {path}: {exc}") from exc
    cfg = dict(cp["simulate"])
    unknown = set(cfg) - SIM_KEYS
    if unknown:
        raise DomainError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(SIM_KEYS)}")
    for key in ("alpha", "grid", "t", "eps_ladder"):
        if key not in cfg:
            raise DomainError(f"config is missing required key {key!r}")
    return cfg


def build_simulation(cfg: dict[str, str]):
    """(SimConfig, NonlinearitySpec) from a parsed key-value config."""
    try:
        return _build_simulation(cfg)
    except DomainError:
        raise
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise DomainError(f"bad config value: {exc}") from exc


def _build_simulation(cfg: dict[str, str]):
    from .multiindex import derive_params
    from .simulator import NonlinearitySpec, ScalarFn, SimConfig

    n = _positive_int(cfg.get("n", "1"))
    p = derive_params(parse_rational(cfg["alpha"]), n, parse_rational(cfg.get("iota", "1/100")))
    M = _positive_int(cfg["grid"])
    T = float(parse_rational(cfg["t"]))
    ladder = _scale_list(cfg["eps_ladder"])
    dt = float(parse_rational(cfg["dt"])) if "dt" in cfg else None
    nl = NonlinearitySpec.build(n, b=cfg.get("b", "zero"), d=cfg.get("d", "zero"),
                                g=cfg.get("g", "zero"), h=cfg.get("h", "zero"))
    initial = None
    if "initial" in cfg:
        f = ScalarFn(cfg["initial"])
        x = np.arange(M) / M
        grids = np.meshgrid(*([x] * n), indexing="ij")
        initial = f(2 * np.pi * sum(grids))
    kw = dict(seed=int(cfg.get("seed", "0")), initial=initial,
              counterterm_mode=cfg.get("counterterm_mode", "leading"),
              mc_samples=_positive_int(cfg.get("mc_samples", "1")),
              sign=int(cfg.get("sign", "1")),
              blowup_bound=float(cfg.get("blowup_bound", "1e6")))
    sim = SimConfig.make(p, M, T, ladder, dt=dt, snapshots=_positive_int(cfg.get("snapshots", "100")), **kw)
    return sim, nl


def cmd_simulate(args) -> int:
    from .simulator import convergence_study

    sim, nl = build_simulation(read_sim_config(args.config))
    rep = convergence_study(sim, nl)
    out = Path(args.out_dir)
    doc = rep.to_json_obj()
    runtime = doc.pop("runtime_s")  # kept out of the file so reruns are byte-identical
    atomic_write(out / "report.json", _dump(doc))
    for name, text in rep.tables().items():
        atomic_write(out / "tables" / name, text)
    if not args.no_plots:
        from .plotting import plot_convergence

        plot_convergence(rep, out / "plots" / "convergence.svg")
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out} ({runtime:.1f} s)", file=sys.stderr)
    return 0


def cmd_coeffs(args) -> int:
    from .kernels import GridSpec, loglog_slope
    from .multiindex import PreMultiIndex
    from .simulator import flow_coefficient, leading_counterterm, second_order_constant

    p = _params(args)
    out = Path(args.out_dir)
    eps = sorted(args.eps, reverse=True)
    dt = args.dt if args.dt is not None else (1.0 / args.grid) ** 2 / 4
    grid = GridSpec(p.n, args.grid, 0.0, 1.0, dt)
    c1 = [leading_counterterm(p, e, grid) for e in eps]
    c2 = [second_order_constant(p, e, grid) for e in eps]
    slope = loglog_slope(eps, c1) if len(eps) > 1 else float("nan")
    rows = ["eps,C1,C2"] + [f"{e!r},{a!r},{b!r}" for e, a, b in zip(eps, c1, c2)]
    atomic_write(out / "constants.csv", "\n".join(rows) + "\n")
    doc = {"params": p.as_dict(), "M": args.grid, "dt": dt, "eps": eps, "C1": c1, "C2": c2,
           "C1_slope": slope, "predicted_slope": float(2 * p.alpha - 2)}
    flow = None
    if args.flow_a:
        a = PreMultiIndex.from_json(args.flow_a)
        mus = tuple(args.mus) if args.mus else (1 / 8, 1 / 16, 1 / 32)
        flow = flow_coefficient(a, p, mus=mus, samples=args.samples, seed=args.seed)
        doc["flow"] = flow.to_json_obj()
    atomic_write(out / "coeffs.json", _dump(doc))
    if not args.no_plots:
        from .plotting import plot_constants, plot_flow_norms

        plot_constants(eps, c1, c2, out / "plots" / "constants.svg", slope if len(eps) > 1 else None)
        if flow is not None:
            plot_flow_norms(flow, out / "plots" / "flow.svg")
    return 0


# ---------------------------------------------------------------------------
# parser


def _model_flags(sp, alpha_required=True):
    sp.add_argument("--alpha", type=_rational, required=alpha_required,
                    help='noise regularity alpha in (0, 1], exact rational "p/q"')
    sp.add_argument("--n", type=_positive_int, default=1, help="space dimension (integer, default 1)")
    sp.add_argument("--iota", type=_rational, default=parse_rational("1/100"),
                    help='small positive rational "p/q" (default 1/100)')


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    ap = _Parser(prog="flowforge", description=__doc__, epilog=UNITS, formatter_class=fmt)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=UNITS, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    sp = add("params", cmd_params, "Print Gamma, delta and kappa0 for (alpha, n).")
    _model_flags(sp)
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--out", help="output file (default: stdout)")

    sp = add("enumerate", cmd_enumerate, "List populated pre-multi-indices of order <= k in canonical order.")
    _model_flags(sp)
    sp.add_argument("--k", type=int, required=True, help="maximal order (integer >= 0)")
    sp.add_argument("--format", choices=("json", "csv"), default="json")
    sp.add_argument("--cap", type=_positive_int, default=1_000_000, help="size cap (integer)")
    sp.add_argument("--out", help="output file (default: stdout)")

    sp = add("flow", cmd_flow, "Emit the flow-equation hierarchy as JSON.")
    _model_flags(sp)
    sp.add_argument("--max-order", type=int, default=None,
                    help="largest order included (integer, default 2 Gamma + 1)")
    sp.add_argument("--cap", type=_positive_int, default=250_000, help="node cap (integer)")
    sp.add_argument("--out", help="output file (default: stdout)")

    sp = add("counterterms", cmd_counterterms, "Emit the relevant counterterm catalog as CSV.")
    _model_flags(sp)
    sp.add_argument("--max-order", type=int, default=None, help="largest order (integer, default Gamma)")
    sp.add_argument("--out", help="output file (default: stdout)")

    sp = add("cumulants", cmd_cumulants, "Classify relevant cumulant lists and report as JSON.")
    _model_flags(sp)
    sp.add_argument("--pmax", type=_positive_int, default=4, help="largest list length (integer)")
    sp.add_argument("--order-cap", type=_positive_int, default=3, help="largest total order (integer)")
    sp.add_argument("--out", help="output file (default: stdout)")

    sp = add("kernels-verify", cmd_kernels_verify, "Measure kernel estimates at dyadic mu and fit exponents.")
    _model_flags(sp)
    sp.add_argument("--grid", type=_positive_int, default=256, help="grid points per unit length M (integer)")
    sp.add_argument("--dt", type=float, default=None, help="time step (decimal, default min(mu)^2 / 32)")
    sp.add_argument("--mus", type=_scale_list, default=None,
                    help='comma-separated mu values, rationals or decimals (default "1/4,1/8,1/16,1/32")')
    sp.add_argument("--out-dir", help="write estimates.csv, checks.json and plots/ here (default: CSV to stdout)")
    sp.add_argument("--no-plots", action="store_true")

    sp = add("simulate", cmd_simulate, "Run the coupled epsilon-ladder convergence study from a config file.")
    sp.add_argument("--config", required=True,
                    help="key = value file; keys: " + ", ".join(sorted(k if k != "t" else "T" for k in SIM_KEYS))
                    + ' (alpha, iota "p/q"; grid integer M; T, dt decimals; eps_ladder comma list of'
                    " rationals or decimals; b, d, g, h and initial are function names such as cos,"
                    " const[1/4], poly[0,1]; initial is evaluated at 2 pi (x_1 + ... + x_n))")
    sp.add_argument("--out-dir", default="flowforge-out", help="output directory")
    sp.add_argument("--no-plots", action="store_true")

    sp = add("coeffs", cmd_coeffs, "Counterterm constants over an epsilon list and optional flow coefficient.")
    _model_flags(sp)
    sp.add_argument("--grid", type=_positive_int, default=512, help="grid points per unit length M (integer)")
    sp.add_argument("--dt", type=float, default=None, help="time step (decimal, default (1/M)^2 / 4)")
    sp.add_argument("--eps", type=_scale_list, default=_scale_list("1/8,1/16,1/32,1/64"),
                    help="comma-separated epsilon values, rationals or decimals")
    sp.add_argument("--flow-a", default=None, help='pre-multi-index JSON, e.g. \'{"h":[1,1]}\'')
    sp.add_argument("--mus", type=_scale_list, default=None,
                    help='comma-separated mu values for the flow coefficient (default "1/8,1/16,1/32")')
    sp.add_argument("--samples", type=_positive_int, default=64, help="Monte-Carlo samples (integer)")
    sp.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    sp.add_argument("--out-dir", default="flowforge-coeffs", help="output directory")
    sp.add_argument("--no-plots", action="store_true")
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FlowforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MemoryError:
        print("error: out of memory", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
