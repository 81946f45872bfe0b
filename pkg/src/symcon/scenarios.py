"""Declarative experiment runner.

A scenario file (``.scn``, JSON) names a model and a list of steps --
certificates, partition checks, simulations, input-scaling experiments --
each with expectations of the form ``[key, op, bound]`` evaluated against
the step's flat result dict.  ``run_scenario`` executes the steps in
order, writes a JSON report (plus trajectory CSVs and SVG plots for the
simulation steps) into the output directory, and returns an exit status:
0 all expectations met, 2 an expectation failed, 1 an execution error.

All randomness is derived from the scenario seed, so reports are
byte-reproducible for a fixed (scenario, seed).
"""

from __future__ import annotations

import importlib.resources
import json
import math
import pathlib

import numpy as np

from . import expr as ex
from .certify import (
    certify_cascade, certify_contraction, certify_second_order,
    certify_toward_subspace, certify_virtual, second_order_from_model,
)
from .errors import ModelError, SymconError
from .measures import MeasureKind
from .model import (
    ParamRamp, Partition, SystemModel, assemble_network,
    coarsest_balanced_partition, compile_field, load_model,
)
from .report import (
    plot_log_series, plot_time_series, write_json_report,
    write_trajectory_csv,
)
from .sampling import sample_box
from .sim import (
    SolverConfig, convergence_rate, fcd_experiment, integrate, integrate_dde,
    periodicity_check, sync_error,
)
from .symmetry import (
    SpatioTemporalAction, action_order, build_action, h_symmetry_residual,
    partition_subspace,
)

__all__ = ["bundled_scenarios", "scenario_path", "load_scenario",
           "run_scenario", "bundled_model_path"]


class ScenarioError(SymconError):
    pass


# ---------------------------------------------------------------------------
# bundled data resolution
# ---------------------------------------------------------------------------

def _data_dir(sub):
    return importlib.resources.files("symcon").joinpath("data", sub)


def bundled_model_path(name):
    p = _data_dir("models").joinpath(f"{name}.sysdl")
    return pathlib.Path(str(p))


def bundled_scenarios():
    """Names of the shipped scenarios, sorted."""
    d = pathlib.Path(str(_data_dir("scenarios")))
    return sorted(p.stem for p in d.glob("*.scn"))


def scenario_path(name):
    p = pathlib.Path(str(_data_dir("scenarios").joinpath(f"{name}.scn")))
    if not p.exists():
        raise ScenarioError(
            f"unknown scenario '{name}'; bundled: {', '.join(bundled_scenarios())}")
    return p


def _resolve_model(ref, params=None):
    """Load a model by bundled name or filesystem path."""
    p = pathlib.Path(ref)
    if not p.exists() and "/" not in ref and not ref.endswith(".sysdl"):
        p = bundled_model_path(ref)
    if not p.exists():
        raise ModelError(f"model file not found: {ref}")
    return load_model(p, params=params)


def _as_system(obj):
    return assemble_network(obj) if not isinstance(obj, SystemModel) else obj


def _load_weight(ref):
    p = pathlib.Path(ref)
    if not p.exists():
        p = pathlib.Path(str(_data_dir("weights").joinpath(f"{ref}.json")))
    if not p.exists():
        raise ScenarioError(f"weight file not found: {ref}")
    data = json.loads(p.read_text())
    if "diag" in data:
        return np.diag([float(v) for v in data["diag"]])
    return np.array(data["matrix"], dtype=float)


def _measure_kind(spec):
    if isinstance(spec, dict):
        w = _load_weight(spec["weight"]) if "weight" in spec else None
        return MeasureKind(spec.get("name", "two"), weight=w)
    return MeasureKind(spec or "two")


def _box(spec):
    return {k: tuple(v) for k, v in spec.items()} if spec else None


def _partition(spec):
    return Partition(tuple(tuple(cl) for cl in spec))


def _signal(text):
    """Compile an input expression over t into a callable."""
    e = ex.parse_expression(str(text))
    for name in ex.free_names(e):
        raise ScenarioError(
            f"input signal may only reference t and numbers, got '{name}'")

    def f(t):
        return float(ex.evaluate(e, ex.Environment(values={}, t=float(t))))

    return f


# ---------------------------------------------------------------------------
# simulation plumbing
# ---------------------------------------------------------------------------

def _solver_config(step):
    return SolverConfig(
        method=step.get("method", "rk45-adaptive"),
        horizon=float(step["horizon"]),
        dt=float(step.get("dt", 0.01)),
        rtol=float(step.get("rtol", 1e-9)),
        atol=float(step.get("atol", 1e-12)),
        ramps=[ParamRamp(r["param"], float(r["t_start"]), float(r["t_end"]),
                         float(r["start"]), float(r["end"]))
               for r in step.get("ramps", [])],
    )


def _initial_state(spec, m, rng):
    if isinstance(spec, dict):
        if "uniform" in spec:
            lo, hi = spec["uniform"]
            x0 = rng.uniform(float(lo), float(hi), m.n)
        else:
            x0 = np.full(m.n, float(spec.get("default", 0.0)))
        for comp, val in spec.get("components", {}).items():
            x0[m.index(comp)] = float(val)
        return x0
    x0 = np.asarray([float(v) for v in spec])
    if len(x0) != m.n:
        raise ScenarioError(f"x0 has {len(x0)} entries, model has {m.n} states")
    return x0


def _run_trajectory(step, m, rng):
    cfg = _solver_config(step)
    x0 = _initial_state(step["x0"], m, rng)
    externals = {k: _signal(v) for k, v in step.get("externals", {}).items()}
    if m.is_delayed:
        history = {k: _signal(v) for k, v in step.get("history", {}).items()}
        if history:
            def hist(t):
                row = x0.copy()
                for comp, sig in history.items():
                    row[m.index(comp)] = sig(t)
                return row
            return integrate_dde(m, hist, cfg, externals=externals or None)
        return integrate_dde(m, x0, cfg, externals=externals or None)
    return integrate(m, x0, cfg, externals=externals or None)


def _strip_delays(m):
    """Replace every delayed reference with the current value (for
    equilibrium computations: at a fixed point x(t - tau) = x(t))."""

    def walk(e):
        if isinstance(e, ex.Delayed):
            return ex.Var(e.name)
        if isinstance(e, ex.Unary):
            return ex.Unary(e.op, walk(e.child))
        if isinstance(e, ex.Bin):
            return ex.Bin(e.op, walk(e.left), walk(e.right))
        if isinstance(e, ex.Call):
            return ex.Call(e.fn, tuple(walk(a) for a in e.args))
        return e

    return SystemModel(m.name, list(m.states), dict(m.params), dict(m.inputs),
                       {}, dict(m.domain), [walk(e) for e in m.field],
                       actions=dict(m.actions), source=m.source)


def _solve_fixed_point(m, guess):
    from scipy.optimize import root
    f = compile_field(_strip_delays(m))
    sol = root(lambda x: f(0.0, x), guess, tol=1e-13)
    # judge by the residual itself: hybr reports no-progress when the guess
    # already sits on the root
    resid = float(np.max(np.abs(f(0.0, sol.x))))
    if resid > 1e-10:
        raise ScenarioError(
            f"fixed-point solve failed (residual {resid:.3e}): {sol.message}")
    return sol.x


def _value_at(t, y, when):
    if when == "end" or when is None:
        return float(y[-1])
    i = int(np.searchsorted(t, float(when)))
    return float(y[min(i, len(y) - 1)])


def _evaluate_metrics(step, m, spec_or_none, traj, results, series_out):
    for met in step.get("metrics", []):
        kind = met["metric"]
        name = met.get("name", kind)
        if kind == "sync":
            pspec = met.get("partition", "coarsest")
            if pspec == "coarsest":
                if spec_or_none is None:
                    raise ScenarioError("coarsest sync metric needs a network model")
                p = coarsest_balanced_partition(spec_or_none)
            else:
                p = _partition(pspec)
            t, e = sync_error(traj, p)
            results[name] = _value_at(t, e, met.get("at"))
            series_out.setdefault("sync", (t, e))
        elif kind == "rate":
            pspec = met.get("partition", "coarsest")
            p = (coarsest_balanced_partition(spec_or_none)
                 if pspec == "coarsest" else _partition(pspec))
            t, e = sync_error(traj, p)
            window = tuple(met["window"]) if "window" in met else None
            results[name] = convergence_rate(t, e, window=window)
            series_out.setdefault("sync", (t, e))
        elif kind == "periodicity":
            results[name] = periodicity_check(
                traj, float(met["T"]), float(met["tail"]))
        elif kind == "hsym":
            gamma = build_action(m, met["action"])
            act = SpatioTemporalAction(gamma, float(met["shift"]))
            ts, rs = h_symmetry_residual(traj, act)
            mask = ts >= float(met.get("after", 0.0))
            results[name] = float(np.max(rs[mask]))
            series_out.setdefault("hsym", (ts, rs))
        elif kind == "fixed_point":
            target = met.get("target", "solve")
            if target == "solve":
                # solve from a neutral guess, independent of the trajectory,
                # so agreement with the endpoint is a real check
                guess = np.asarray([float(v) for v in met["guess"]]) \
                    if "guess" in met else np.zeros(m.n)
                fp = _solve_fixed_point(m, guess)
            else:
                fp = np.asarray([float(v) for v in target])
            results[name] = float(np.max(np.abs(traj.x[-1] - fp)))
            results[name + "_value"] = [round(float(v), 12) for v in fp]
        elif kind == "component_gap":
            col = traj.component(met["component"])
            gap = np.abs(col - float(met.get("target", 0.0)))
            results[name] = _value_at(traj.t, gap, met.get("at"))
        else:
            raise ScenarioError(f"unknown metric '{kind}'")


# ---------------------------------------------------------------------------
# step handlers
# ---------------------------------------------------------------------------

def _load_step_model(step, scn, assemble=True):
    ref = step.get("model", scn.get("model"))
    if ref is None:
        raise ScenarioError("step has no model and the scenario declares none")
    obj = _resolve_model(ref, params=step.get("params"))
    spec = None if isinstance(obj, SystemModel) else obj
    return (_as_system(obj) if assemble else obj), spec


def _step_certify(step, scn, ctx):
    m, spec = _load_step_model(step, scn)
    kind = _measure_kind(step.get("measure"))
    kw = dict(box=_box(step.get("box")), kind=kind,
              samples=int(step.get("samples", 400)),
              horizon=float(step.get("horizon", 0.0)),
              input_box=_box(step.get("input_box")), seed=ctx["seed"])
    if "toward" in step:
        sub = partition_subspace(m, _partition(step["toward"]))
        cert = certify_toward_subspace(m, sub, **kw)
    else:
        cert = certify_contraction(m, **kw)
    return {"passed": cert.passed, "max_mu": cert.max_mu,
            "margin": cert.margin, "kind": str(kind.base)}


def _step_cascade(step, scn, ctx):
    _, spec = _load_step_model(step, scn, assemble=False)
    if spec is None:
        raise ScenarioError("cascade steps need a network model")
    casc = certify_cascade(
        spec, [_partition(p) for p in step["partitions"]],
        box=_box(step.get("box")), kind=_measure_kind(step.get("measure")),
        samples=int(step.get("samples", 400)),
        horizon=float(step.get("horizon", 0.0)), seed=ctx["seed"])
    out = {"passed": casc.passed, "margin": casc.margin,
           "failing_stage": casc.failing_stage(),
           "stage_margins": [s["certificate"].margin for s in casc.stages]}
    return out


def _step_partition(step, scn, ctx):
    obj, spec = _load_step_model(step, scn, assemble=False)
    if spec is None:
        raise ScenarioError("partition steps need a network model")
    seed_p = _partition(step["seed_partition"]) if "seed_partition" in step else None
    p = coarsest_balanced_partition(spec, seed=seed_p)
    return {"clusters": [list(cl) for cl in p.clusters], "k": p.k}


def _step_second_order(step, scn, ctx):
    m, _ = _load_step_model(step, scn)
    eps, phi = second_order_from_model(
        m, xname=step.get("xname", "x"), yname=step.get("yname", "y"),
        uname=step.get("uname", "u"))
    cert = certify_second_order(
        eps, phi, {k: tuple(v) for k, v in step["box"].items()},
        samples=int(step.get("samples", 400)),
        xname=step.get("xname", "x"), uname=step.get("uname", "u"),
        seed=ctx["seed"])
    return {"passed": cert.passed, "inf_condition": cert.details["inf_condition"],
            "eps": eps, "margin": cert.margin}


def _step_bound(step, scn, ctx):
    """Sampled infimum of an expression over a box (corners included);
    passes iff the infimum exceeds the declared floor (default 0)."""
    m, _ = _load_step_model(step, scn)
    e = ex.parse_expression(step["expr"])
    names = sorted(ex.free_names(e) - set(m.params))
    bounds = []
    for name in names:
        if name not in step["box"]:
            raise ScenarioError(f"bound step box is missing '{name}'")
        bounds.append(tuple(step["box"][name]))
    pts = sample_box(bounds, int(step.get("samples", 400)), seed=ctx["seed"])
    corners = np.array(np.meshgrid(*[b for b in bounds])).reshape(len(bounds), -1).T \
        if bounds else np.zeros((0, 0))
    pts = np.vstack([corners, pts]) if len(corners) else pts
    worst = math.inf
    for row in pts:
        env = ex.Environment(values={**m.params, **dict(zip(names, row))})
        worst = min(worst, float(ex.evaluate(e, env)))
    floor = float(step.get("floor", 0.0))
    return {"inf": worst, "passed": worst > floor, "samples": len(pts)}


def _step_virtual(step, scn, ctx):
    real_obj = _resolve_model(step.get("real", scn.get("model")),
                              params=step.get("real_params"))
    real = _as_system(real_obj)
    v = _resolve_model(step["model"], params=step.get("params"))
    cert = certify_virtual(
        v, real, step["instances"], box=_box(step.get("real_box")),
        input_box=_box(step.get("input_box")),
        kind=_measure_kind(step.get("measure")),
        samples=int(step.get("samples", 400)), seed=ctx["seed"])
    return {"passed": cert.passed, "max_mu": cert.max_mu,
            "consistency_residual": cert.details["consistency_residual"],
            "consistency_status": cert.details["consistency_status"]}


def _step_equivariance(step, scn, ctx):
    from .symmetry import check_equivariance, check_input_equivariance
    m, _ = _load_step_model(step, scn)
    action = build_action(m, step["action"])
    if step.get("with_inputs"):
        rep = check_input_equivariance(
            m, action, samples=int(step.get("samples", 200)),
            box=_box(step.get("box")), input_box=_box(step.get("input_box")))
    else:
        rep = check_equivariance(m, action,
                                 samples=int(step.get("samples", 400)),
                                 box=_box(step.get("box")))
    return {"passed": rep["passed"], "max_residual": rep["max_residual"]}


def _step_action_order(step, scn, ctx):
    m, _ = _load_step_model(step, scn)
    gamma = build_action(m, step["action"])
    return {"order": action_order(gamma)}


def _step_simulate(step, scn, ctx):
    m, spec = _load_step_model(step, scn)
    rng = np.random.default_rng(ctx["seed"])
    traj = _run_trajectory(step, m, rng)
    results = {"horizon": traj.horizon, "states": m.n}
    series = {}
    _evaluate_metrics(step, m, spec, traj, results, series)
    if ctx["out_dir"] is not None:
        label = ctx["label"]
        out = ctx["out_dir"]
        arts = ctx["artifacts"]
        arts.append(str(write_trajectory_csv(traj, out / f"{label}.csv")))
        arts.append(str(plot_time_series(traj, out / f"{label}.svg",
                                         title=label)))
        if "sync" in series:
            t, e = series["sync"]
            arts.append(str(plot_log_series(
                t, e, out / f"{label}_sync.svg", title=f"{label}: cluster gap",
                ylabel="sync error")))
        if "hsym" in series:
            ts, rs = series["hsym"]
            arts.append(str(plot_log_series(
                ts, rs, out / f"{label}_hsym.svg",
                title=f"{label}: spatio-temporal residual", ylabel="residual")))
    return results


def _step_compare_runs(step, scn, ctx):
    m, spec = _load_step_model(step, scn)
    runs = step["runs"]
    if len(runs) != 2:
        raise ScenarioError("compare_runs expects exactly two runs")
    trajs = []
    for i, run in enumerate(runs):
        merged = {**step, **run}
        merged.pop("runs", None)
        mi, _ = _load_step_model(merged, scn)
        rng = np.random.default_rng(ctx["seed"] + i)
        trajs.append((mi, _run_trajectory(merged, mi, rng)))
    grid = np.linspace(0.0, float(step["horizon"]),
                       int(step.get("grid", 801)))
    cols = [ [mi.index(c) for c in step["compare"]] for mi, _ in trajs ]
    xa = trajs[0][1].at(grid)[:, cols[0]]
    xb = trajs[1][1].at(grid)[:, cols[1]]
    gap = np.max(np.abs(xa - xb), axis=1)
    after = float(step.get("after", 0.0))
    results = {"max_gap": float(np.max(gap[grid >= after])),
               "max_gap_all": float(np.max(gap)), "after": after}
    if ctx["out_dir"] is not None:
        label, out, arts = ctx["label"], ctx["out_dir"], ctx["artifacts"]
        for tag, (_, traj) in zip(("a", "b"), trajs):
            arts.append(str(write_trajectory_csv(traj, out / f"{label}_{tag}.csv")))
        arts.append(str(plot_log_series(
            grid, np.maximum(gap, 1e-18), out / f"{label}_gap.svg",
            title=f"{label}: run gap", ylabel="gap")))
    return results


def _step_fcd(step, scn, ctx):
    ref = step.get("model", scn.get("model"))
    scale_param = step["scale_param"]
    m_i = _resolve_model(ref, params={**step.get("params", {}),
                                      scale_param: float(step["scale_i"])})
    m_j = _resolve_model(ref, params={**step.get("params", {}),
                                      scale_param: float(step["scale_j"])})
    m_i, m_j = _as_system(m_i), _as_system(m_j)
    pair_i = build_action(m_i, step["action"])
    pair_j = build_action(m_j, step["action"])
    cfg = _solver_config(step)
    rep = fcd_experiment(
        m_i, pair_i, pair_j,
        input_i=_signal(step["input_i"]), input_j=_signal(step["input_j"]),
        shared=step["shared"],
        x0_i=[float(v) for v in step["x0_i"]],
        x0_j=[float(v) for v in step["x0_j"]], cfg=cfg,
        require_matched_inputs=bool(step.get("matched", True)))
    results = {"input_residual": rep["input_residual"],
               "max_shared_gap": rep["max_shared_gap"],
               "max_transformed_gap": rep["max_transformed_gap"]}
    if ctx["out_dir"] is not None:
        label, out, arts = ctx["label"], ctx["out_dir"], ctx["artifacts"]
        arts.append(str(write_trajectory_csv(rep["traj_i"], out / f"{label}_i.csv")))
        arts.append(str(write_trajectory_csv(rep["traj_j"], out / f"{label}_j.csv")))
        arts.append(str(plot_log_series(
            rep["grid"], np.maximum(rep["shared_gap"], 1e-18),
            out / f"{label}_gap.svg", title=f"{label}: shared-output gap",
            ylabel="gap")))
        arts.append(str(plot_time_series(rep["traj_i"], out / f"{label}_i.svg",
                                         title=f"{label}: first arm")))
    return results


_STEPS = {
    "certify": _step_certify,
    "cascade": _step_cascade,
    "partition": _step_partition,
    "second_order": _step_second_order,
    "bound": _step_bound,
    "virtual": _step_virtual,
    "equivariance": _step_equivariance,
    "action_order": _step_action_order,
    "simulate": _step_simulate,
    "compare_runs": _step_compare_runs,
    "fcd": _step_fcd,
}


# ---------------------------------------------------------------------------
# expectations and the runner
# ---------------------------------------------------------------------------

_OPS = {
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def _check_expectations(step, results):
    checks = []
    for item in step.get("expect", []):
        key, op, bound = item[0], item[1], item[2]
        if key not in results:
            checks.append({"key": key, "op": op, "bound": bound,
                           "value": None, "passed": False,
                           "error": "no such result key"})
            continue
        value = results[key]
        if op == "approx":
            tol = float(item[3]) if len(item) > 3 else 1e-9
            ok = abs(float(value) - float(bound)) <= tol
        elif op in _OPS:
            ok = bool(_OPS[op](value, bound))
        else:
            raise ScenarioError(f"unknown expectation operator '{op}'")
        checks.append({"key": key, "op": op, "bound": bound,
                       "value": value, "passed": ok})
    return checks


def load_scenario(path):
    p = pathlib.Path(path)
    if not p.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        scn = json.loads(p.read_text())
    except ValueError as exc:
        raise ScenarioError(f"invalid scenario JSON in {path}: {exc}")
    if "steps" not in scn or not isinstance(scn["steps"], list):
        raise ScenarioError(f"scenario {path} declares no steps")
    return scn


def run_scenario(path, out_dir=None):
    """Execute a scenario; returns (exit_code, report dict)."""
    scn = load_scenario(path)
    name = scn.get("name", pathlib.Path(path).stem)
    seed = int(scn.get("seed", 0))
    out = pathlib.Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    steps_out = []
    all_ok = True
    for i, step in enumerate(scn["steps"]):
        kind = step.get("kind")
        if kind not in _STEPS:
            raise ScenarioError(f"step {i + 1}: unknown kind '{kind}'")
        label = step.get("label", f"step{i + 1}_{kind}")
        ctx = {"seed": seed + i, "out_dir": out, "label": label,
               "artifacts": artifacts}
        try:
            results = _STEPS[kind](step, scn, ctx)
        except SymconError as exc:
            raise ScenarioError(f"step '{label}' failed: {exc}")
        checks = _check_expectations(step, results)
        ok = all(c["passed"] for c in checks)
        all_ok = all_ok and ok
        steps_out.append({"label": label, "kind": kind, "results": results,
                          "expectations": checks, "passed": ok})
    report = {"scenario": name, "seed": seed, "model": scn.get("model"),
              "passed": all_ok, "steps": steps_out,
              "artifacts": sorted(pathlib.Path(a).name for a in artifacts)}
    if out is not None:
        write_json_report(report, out / "report.json")
    return (0 if all_ok else 2), report
