"""Command-line front end.

Subcommands::

    symcon check <model> --measure {1|2|inf} [--weight F] [--toward ACTION]
    symcon partition <model>
    symcon simulate <model> --x0 ... --horizon ... [--metric sync|period|rate]
    symcon fcd <model> --action-i N[:p=v] --action-j N[:p=v] --input-i E --input-j E
    symcon run <scenario.scn> [--out DIR]
    symcon reproduce <name> [--out DIR]

Exit codes: 0 pass, 1 error, 2 expectation/certificate failure.  ``--json``
prints the machine-readable report on stdout.  The environment variable
SYMCON_THREADS caps worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .certify import certify_contraction, certify_toward_subspace
from .errors import SymconError
from .measures import MeasureKind
from .model import (
    SystemModel, assemble_network, coarsest_balanced_partition, load_model,
)
from .report import _Encoder, plot_time_series, write_trajectory_csv
from .scenarios import (
    ScenarioError, _load_weight, _resolve_model, _signal, bundled_scenarios,
    run_scenario, scenario_path,
)
from .sim import (
    SolverConfig, convergence_rate, fcd_experiment, integrate, integrate_dde,
    periodicity_check, sync_error,
)
from .symmetry import build_action, fixed_subspace

_MEASURES = {"1": "one", "one": "one", "2": "two", "two": "two",
             "inf": "inf"}


def _emit(args, report, text_lines):
    if getattr(args, "json", False):
        print(json.dumps(report, indent=2, sort_keys=True, cls=_Encoder))
    else:
        for line in text_lines:
            print(line)


def _parse_kv_ranges(items):
    out = {}
    for item in items or []:
        try:
            key, rng = item.split("=", 1)
            lo, hi = rng.split(":", 1)
            out[key.strip()] = (float(lo), float(hi))
        except ValueError:
            raise SymconError(f"bad range '{item}', expected name=lo:hi")
    return out


def _parse_floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _load(ref, params=None):
    return _resolve_model(ref, params=params)


def _flat(obj):
    return assemble_network(obj) if not isinstance(obj, SystemModel) else obj


def _cmd_check(args):
    obj = _load(args.model)
    m = _flat(obj)
    weight = _load_weight(args.weight) if args.weight else None
    kind = MeasureKind(_MEASURES[args.measure], weight=weight)
    kw = dict(box=_parse_kv_ranges(args.box) or None, kind=kind,
              samples=args.samples, horizon=args.horizon,
              input_box=_parse_kv_ranges(args.input_box) or None,
              seed=args.seed)
    if args.toward:
        sub = fixed_subspace(build_action(m, args.toward))
        cert = certify_toward_subspace(m, sub, **kw)
    else:
        cert = certify_contraction(m, **kw)
    report = cert.report()
    _emit(args, report, [
        f"model:   {m.name}",
        f"measure: {args.measure}" + (" (weighted)" if weight is not None else ""),
        f"target:  {cert.target}",
        f"max mu:  {cert.max_mu:.6g}",
        f"margin:  {cert.margin:.6g}",
        f"result:  {'PASS' if cert.passed else 'FAIL'}",
    ])
    return 0 if cert.passed else 2


def _cmd_partition(args):
    obj = _load(args.model)
    if isinstance(obj, SystemModel):
        raise SymconError("partitioning needs a network model")
    p = coarsest_balanced_partition(obj)
    report = {"model": obj.name, "k": p.k,
              "clusters": [list(cl) for cl in p.clusters]}
    _emit(args, report, [f"model: {obj.name}", f"clusters: {p.k}"] +
          [f"  {{{', '.join(cl)}}}" for cl in p.clusters])
    return 0


def _cmd_simulate(args):
    obj = _load(args.model)
    m = _flat(obj)
    x0 = np.asarray(_parse_floats(args.x0))
    if len(x0) != m.n:
        raise SymconError(f"--x0 has {len(x0)} entries, model has {m.n} states")
    cfg = SolverConfig(method=args.method, horizon=args.horizon, dt=args.dt,
                       rtol=args.rtol, atol=args.atol)
    externals = {k: _signal(v) for k, v in
                 (item.split("=", 1) for item in args.input or [])}
    if m.is_delayed:
        traj = integrate_dde(m, x0, cfg, externals=externals or None)
    else:
        traj = integrate(m, x0, cfg, externals=externals or None)
    report = {"model": m.name, "states": m.states, "horizon": traj.horizon,
              "final": traj.x[-1].tolist()}
    lines = [f"model: {m.name}", f"horizon: {traj.horizon:g}",
             "final state: " + ", ".join(f"{v:.6g}" for v in traj.x[-1])]
    for metric in args.metric or []:
        if metric in ("sync", "rate"):
            if isinstance(obj, SystemModel):
                raise SymconError(f"--metric {metric} needs a network model")
            p = coarsest_balanced_partition(obj)
            t, e = sync_error(traj, p)
            if metric == "sync":
                report["sync_error_end"] = float(e[-1])
                lines.append(f"sync error (end): {e[-1]:.3e}")
            else:
                report["rate"] = convergence_rate(t, e)
                lines.append(f"fitted decay rate: {report['rate']:.4f}")
        elif metric == "period":
            if args.period is None:
                raise SymconError("--metric period needs --period T")
            tail = args.tail if args.tail is not None else args.period
            report["period_residual"] = periodicity_check(traj, args.period, tail)
            lines.append(f"periodicity residual: {report['period_residual']:.3e}")
        else:
            raise SymconError(f"unknown metric '{metric}'")
    if args.out:
        import pathlib
        out = pathlib.Path(args.out)
        write_trajectory_csv(traj, out / f"{m.name}.csv")
        plot_time_series(traj, out / f"{m.name}.svg", title=m.name)
        report["artifacts"] = [f"{m.name}.csv", f"{m.name}.svg"]
        lines.append(f"artifacts written to {out}")
    _emit(args, report, lines)
    return 0


def _parse_action_ref(text):
    """``name[:param=value,...]`` -> (name, param overrides)."""
    if ":" not in text:
        return text, {}
    name, rest = text.split(":", 1)
    params = {}
    for piece in rest.split(","):
        k, v = piece.split("=", 1)
        params[k.strip()] = float(v)
    return name, params


def _cmd_fcd(args):
    name_i, params_i = _parse_action_ref(args.action_i)
    name_j, params_j = _parse_action_ref(args.action_j)
    m_i = _flat(_load(args.model, params=params_i or None))
    m_j = _flat(_load(args.model, params=params_j or None))
    pair_i = build_action(m_i, name_i)
    pair_j = build_action(m_j, name_j)
    cfg = SolverConfig(method="rk45-adaptive", horizon=args.horizon,
                       rtol=args.rtol, atol=args.atol)
    rep = fcd_experiment(
        m_i, pair_i, pair_j, input_i=_signal(args.input_i),
        input_j=_signal(args.input_j), shared=args.shared or [],
        x0_i=_parse_floats(args.x0_i), x0_j=_parse_floats(args.x0_j), cfg=cfg,
        require_matched_inputs=not args.allow_unmatched)
    tol = args.tol
    passed = (rep["max_shared_gap"] <= tol and rep["max_transformed_gap"] <= tol)
    report = {"model": m_i.name, "input_residual": rep["input_residual"],
              "max_shared_gap": rep["max_shared_gap"],
              "max_transformed_gap": rep["max_transformed_gap"],
              "tolerance": tol, "passed": passed}
    _emit(args, report, [
        f"model: {m_i.name}",
        f"input residual:      {rep['input_residual']:.3e}",
        f"max shared gap:      {rep['max_shared_gap']:.3e}",
        f"max transformed gap: {rep['max_transformed_gap']:.3e}",
        f"result: {'PASS' if passed else 'FAIL'} (tolerance {tol:g})",
    ])
    return 0 if passed else 2


def _report_lines(report):
    lines = [f"scenario: {report['scenario']}"]
    for step in report["steps"]:
        mark = "pass" if step["passed"] else "FAIL"
        lines.append(f"  [{mark}] {step['label']} ({step['kind']})")
        for c in step["expectations"]:
            ok = "ok " if c["passed"] else "BAD"
            val = c["value"]
            if isinstance(val, float):
                val = f"{val:.6g}"
            lines.append(f"      {ok} {c['key']} {c['op']} {c['bound']} "
                         f"(got {val})")
    lines.append(f"result: {'PASS' if report['passed'] else 'FAIL'}")
    return lines


def _cmd_run(args):
    out = args.out if args.out else f"symcon-runs/{_scn_name(args.scenario)}"
    code, report = run_scenario(args.scenario, out_dir=out)
    _emit(args, report, _report_lines(report) + [f"artifacts: {out}"])
    return code


def _scn_name(path):
    import pathlib
    return pathlib.Path(path).stem


def _cmd_reproduce(args):
    path = scenario_path(args.name)
    out = args.out if args.out else f"symcon-runs/{args.name}"
    code, report = run_scenario(path, out_dir=out)
    _emit(args, report, _report_lines(report) + [f"artifacts: {out}"])
    return code


def build_parser():
    ap = argparse.ArgumentParser(
        prog="symcon",
        description="Contraction certificates, synchrony partitions, and "
                    "simulations for nonlinear network models.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true",
                       help="machine-readable report on stdout")

    p = sub.add_parser("check", help="contraction certificate for a model")
    p.add_argument("model")
    p.add_argument("--measure", choices=sorted(_MEASURES), default="2")
    p.add_argument("--weight", help="weight file (bundled name or path)")
    p.add_argument("--toward", metavar="ACTION",
                   help="certify toward the fixed subspace of this action")
    p.add_argument("--box", action="append", metavar="COMP=LO:HI")
    p.add_argument("--input-box", action="append", metavar="NAME=LO:HI")
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--horizon", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("partition", help="coarsest balanced partition")
    p.add_argument("model")
    common(p)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("simulate", help="integrate a model and report metrics")
    p.add_argument("model")
    p.add_argument("--x0", required=True, help="comma-separated initial state")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--method", choices=["rk4-fixed", "rk45-adaptive"],
                   default="rk45-adaptive")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--rtol", type=float, default=1e-9)
    p.add_argument("--atol", type=float, default=1e-12)
    p.add_argument("--input", action="append", metavar="NAME=EXPR",
                   help="bind an external input to an expression of t")
    p.add_argument("--metric", action="append",
                   choices=["sync", "period", "rate"])
    p.add_argument("--period", type=float)
    p.add_argument("--tail", type=float)
    p.add_argument("--out", help="directory for CSV/SVG artifacts")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fcd", help="two-arm input-scaling experiment")
    p.add_argument("model")
    p.add_argument("--action-i", required=True, metavar="NAME[:p=v,...]")
    p.add_argument("--action-j", required=True, metavar="NAME[:p=v,...]")
    p.add_argument("--input-i", required=True, metavar="EXPR")
    p.add_argument("--input-j", required=True, metavar="EXPR")
    p.add_argument("--shared", action="append", metavar="COMP")
    p.add_argument("--x0-i", required=True)
    p.add_argument("--x0-j", required=True)
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("--rtol", type=float, default=1e-9)
    p.add_argument("--atol", type=float, default=1e-12)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--allow-unmatched", action="store_true")
    common(p)
    p.set_defaults(func=_cmd_fcd)

    p = sub.add_parser("run", help="execute a scenario file")
    p.add_argument("scenario")
    p.add_argument("--out", help="output directory (default symcon-runs/<name>)")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("reproduce", help="run a bundled scenario")
    p.add_argument("name", metavar="|".join(
        ["chain4", "chain8", "hopfield13", "i1ffl-fcd", "chemotaxis-fcd",
         "quorum-chemotaxis", "quorum-periodic", "quorum-delay", "hsym-demo"]))
    p.add_argument("--out", help="output directory (default symcon-runs/<name>)")
    common(p)
    p.set_defaults(func=_cmd_reproduce)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (SymconError, ScenarioError) as exc:
        print(f"symcon: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"symcon: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
