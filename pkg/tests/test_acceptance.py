"""End-to-end acceptance checks: every top-level guarantee of the toolkit,
each against an independent oracle or an explicit numeric tolerance, with
runtime budgets where responsiveness is part of the contract."""

import itertools
import time

import numpy as np
import pytest

from symcon.certify import (
    certify_cascade, certify_second_order, second_order_from_model,
)
from symcon.measures import MeasureKind, matrix_measure, measure_limit_estimate
from symcon.model import (
    Partition, assemble_network, coarsest_balanced_partition, is_balanced,
    loads_model,
)
from symcon.scenarios import _resolve_model, run_scenario, scenario_path
from symcon.sim import (
    SolverConfig, convergence_rate, fcd_experiment, integrate, sync_error,
)
from symcon.symmetry import build_action, fixed_subspace, principal_angles


def _chain4_spec(k=1.0):
    return _resolve_model("chain4", params={"k": k})


def _report_result(report, label, key):
    for step in report["steps"]:
        if step["label"] == label:
            return step["results"][key]
    raise AssertionError(f"no step labelled '{label}' in report")


# ---------------------------------------------------------------------------
# 1. matrix measures against the definitional limit
# ---------------------------------------------------------------------------

def test_measure_formulas_match_definitional_limit_on_random_matrices():
    start = time.monotonic()
    rng = np.random.default_rng(42)
    for _ in range(500):
        n = int(rng.integers(1, 9))
        A = rng.normal(scale=3.0, size=(n, n))
        tol = 1e-4 * (1.0 + np.linalg.norm(A, 2))
        for base in ("one", "two", "inf"):
            kind = MeasureKind(base)
            exact = matrix_measure(A, kind)
            limit = measure_limit_estimate(A, kind, h=1e-7)
            assert abs(exact - limit) <= tol, (base, A)
    assert time.monotonic() - start < 5.0


# ---------------------------------------------------------------------------
# 2. chain-of-four synchronization
# ---------------------------------------------------------------------------

CHAIN4_STAGES = [Partition((("1", "4"), ("2", "3"))),
                 Partition((("1", "2", "3", "4"),))]


def test_chain4_cascade_certificate_and_simulated_decay():
    start = time.monotonic()
    spec = _chain4_spec()
    casc = certify_cascade(spec, CHAIN4_STAGES, kind=MeasureKind("two"))
    assert casc.passed
    assert casc.margin >= 1.0

    m = assemble_network(spec)
    sync_p = Partition((("1", "2", "3", "4"),))
    cfg = SolverConfig(method="rk45-adaptive", horizon=32.0, rtol=1e-10,
                       atol=1e-13)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0 = rng.uniform(-5.0, 5.0, 4)
        traj = integrate(m, x0, cfg)
        t, e = sync_error(traj, sync_p)
        i30 = int(np.searchsorted(t, 30.0))
        assert e[min(i30, len(e) - 1)] <= 1e-6
        rate = convergence_rate(t, e, window=(1.0, 15.0))
        assert rate >= casc.margin - 0.05
    assert time.monotonic() - start < 10.0


def test_chain4_repulsive_coupling_fails_first_stage():
    casc = certify_cascade(_chain4_spec(k=-1.0), CHAIN4_STAGES,
                           kind=MeasureKind("two"))
    assert not casc.passed
    assert casc.failing_stage() == 0


# ---------------------------------------------------------------------------
# 3. the mirror action's transverse basis
# ---------------------------------------------------------------------------

def test_mirror_fixed_subspace_complement_matches_hand_basis():
    m = assemble_network(_chain4_spec())
    sub = fixed_subspace(build_action(m, "mirror"))
    v2 = np.array([[-1.0, 0.0, 0.0, 1.0],
                   [0.0, -1.0, 1.0, 0.0]]) / np.sqrt(2.0)
    angles = principal_angles(sub.complement, v2)
    assert sub.complement.shape == (2, 4)
    assert np.max(np.abs(angles)) <= 1e-10


# ---------------------------------------------------------------------------
# 4. fold-change detection of the feed-forward loop
# ---------------------------------------------------------------------------

def _i1ffl_pair(chimin):
    m = _resolve_model("i1ffl", params={"chimin": chimin})
    return m, build_action(m, "fold")


def test_i1ffl_fold_change_detection_on_random_steps():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    cfg = SolverConfig(method="rk45-adaptive", horizon=30.0, rtol=1e-9,
                       atol=1e-12)
    for _ in range(5):
        u0 = float(rng.uniform(0.5, 2.0))
        u1 = float(rng.uniform(2.0, 4.0))
        t_step = float(rng.uniform(5.0, 15.0))
        m_i, pair_i = _i1ffl_pair(u0)
        m_j, pair_j = _i1ffl_pair(2.0 * u0)
        rep = fcd_experiment(
            m_i, pair_i, pair_j,
            input_i=lambda t: u0 + (u1 - u0) * (t >= t_step),
            input_j=lambda t: 2.0 * (u0 + (u1 - u0) * (t >= t_step)),
            shared=["Z"], x0_i=[u0, 1.0], x0_j=[2.0 * u0, 1.0], cfg=cfg)
        assert rep["max_shared_gap"] <= 1e-6
        assert rep["max_transformed_gap"] <= 1e-6
    assert time.monotonic() - start < 10.0


def test_i1ffl_unmatched_scaling_is_detected():
    # second arm doubles the input but keeps the first arm's reference scale,
    # so its initial Y is no longer matched to its input
    u0, u1 = 1.0, 3.0
    m_i, pair_i = _i1ffl_pair(u0)
    m_j, pair_j = _i1ffl_pair(2.0 * u0)
    cfg = SolverConfig(method="rk45-adaptive", horizon=30.0, rtol=1e-9,
                       atol=1e-12)
    rep = fcd_experiment(
        m_i, pair_i, pair_j,
        input_i=lambda t: u0 + (u1 - u0) * (t >= 10.0),
        input_j=lambda t: 2.0 * (u0 + (u1 - u0) * (t >= 10.0)),
        shared=["Z"], x0_i=[u0, 1.0], x0_j=[u0, 1.0], cfg=cfg)
    assert rep["max_shared_gap"] >= 1e-2


# ---------------------------------------------------------------------------
# 5. ratio-sensing adaptation: condition, invariance, adaptation
# ---------------------------------------------------------------------------

def test_adaptation_condition_and_scaled_input_invariance():
    m = _resolve_model("chemotaxis")
    eps, phi = second_order_from_model(m)
    assert certify_second_order(eps, phi, {"x": (1, 10), "u": (1, 4)}).passed
    assert not certify_second_order(eps, phi, {"x": (0.1, 0.5), "u": (1, 4)}).passed

    m_i = _resolve_model("chemotaxis", params={"ubar": 1.0})
    m_j = _resolve_model("chemotaxis", params={"ubar": 2.0})
    cfg = SolverConfig(method="rk45-adaptive", horizon=50.0, rtol=1e-10,
                       atol=1e-13)
    rep = fcd_experiment(
        m_i, build_action(m_i, "fold"), build_action(m_j, "fold"),
        input_i=lambda t: 1.0 + 2.0 * (t >= 10.0),
        input_j=lambda t: 2.0 + 4.0 * (t >= 10.0),
        shared=["y"], x0_i=[1.0, 1.0], x0_j=[2.0, 1.0], cfg=cfg)
    assert rep["max_shared_gap"] <= 1e-6
    for traj in (rep["traj_i"], rep["traj_j"]):
        assert abs(traj.component("y")[-1] - 1.0) <= 1e-4


# ---------------------------------------------------------------------------
# 6-10. bundled experiment scenarios
# ---------------------------------------------------------------------------

def test_thirteen_node_polysynchrony_scenario(tmp_path):
    start = time.monotonic()
    code, report = run_scenario(scenario_path("hopfield13"), out_dir=tmp_path)
    assert code == 0
    assert _report_result(report, "one_norm_b0", "passed") is True
    assert _report_result(report, "sync_with_ramp", "sync_before_ramp") <= 1e-6
    assert _report_result(report, "sync_with_ramp", "sync_end") <= 1e-6
    assert _report_result(report, "split_sync", "refined_sync_end") <= 1e-6
    assert _report_result(report, "split_sync", "merged_sync_end") >= 1e-3
    assert _report_result(report, "classes_with_feedback", "clusters") == [
        ["1", "3", "5", "7"], ["2", "4", "6", "8"],
        ["9", "10", "11", "12"], ["13"]]
    assert time.monotonic() - start < 30.0


def test_medium_coupled_population_scenario(tmp_path):
    code, report = run_scenario(scenario_path("quorum-chemotaxis"),
                                out_dir=tmp_path)
    assert code == 0
    assert _report_result(report, "damping_condition", "inf") > 0.0
    assert _report_result(report, "observer_consistency",
                          "consistency_residual") <= 1e-10
    assert _report_result(report, "sync", "sync_end") <= 1e-5
    assert _report_result(report, "output_invariance", "max_gap") <= 1e-5


def test_periodic_entrainment_scenario(tmp_path):
    code, report = run_scenario(scenario_path("quorum-periodic"),
                                out_dir=tmp_path)
    assert code == 0
    assert _report_result(report, "node_contracting", "passed") is True
    assert _report_result(report, "reduced_contracting", "passed") is True
    assert _report_result(report, "entrainment", "period_residual") <= 1e-5


def test_delayed_population_reaches_the_analytic_fixed_point(tmp_path):
    code, report = run_scenario(scenario_path("quorum-delay"), out_dir=tmp_path)
    assert code == 0
    # independent oracle: on the synchronous subspace the equilibrium solves
    # the 2x2 linear system  -2 x + z = -1,  5 x - 6 z = -2
    xbar, zbar = np.linalg.solve([[-2.0, 1.0], [5.0, -6.0]], [-1.0, -2.0])
    oracle = np.array([xbar] * 5 + [zbar])
    for label in ("delay_half", "delay_one"):
        assert _report_result(report, label, "fp_residual") <= 1e-8
        solved = np.array(_report_result(report, label, "fp_residual_value"))
        assert np.max(np.abs(solved - oracle)) <= 1e-9


def test_quarter_turn_spatiotemporal_symmetry_scenario(tmp_path):
    code, report = run_scenario(scenario_path("hsym-demo"), out_dir=tmp_path)
    assert code == 0
    assert _report_result(report, "steady_orbit", "hsym_residual") <= 1e-6
    assert _report_result(report, "steady_orbit", "period_residual") <= 1e-6
    assert _report_result(report, "quarter_turn", "order") == 4


# ---------------------------------------------------------------------------
# 11. coarsest balanced partitions on random colored digraphs
# ---------------------------------------------------------------------------

def _random_network(rng, max_nodes=20):
    n = int(rng.integers(2, max_nodes + 1))
    n_templates = int(rng.integers(1, min(3, n) + 1))
    n_labels = int(rng.integers(1, 3))
    lines = ["network random"]
    for ti in range(n_templates):
        lines += [f"template t{ti} {{", "  states x",
                  f"  dynamics d/dt x = -{ti + 1}*x", "}"]
    tmpl = {str(i + 1): f"t{int(rng.integers(n_templates))}" for i in range(n)}
    for node, tn in tmpl.items():
        lines.append(f"node {node} : {tn}")
    labels = set()
    edges = []
    p_edge = min(0.9, 3.0 / n)
    for a, b in itertools.permutations(tmpl, 2):
        if rng.random() < p_edge:
            k = int(rng.integers(n_labels))
            # one label per (kind, template pair): equivalent arrows must
            # join equivalent endpoints
            lab = f"c{k}_{tmpl[a]}_{tmpl[b]}"
            labels.add(lab)
            edges.append(f"edge {a} -> {b} : {lab}")
    for lab in sorted(labels):
        lines.append(f"coupling {lab}(tail, head) = tail - head")
    lines += edges
    return loads_model("\n".join(lines))


def _set_partitions(items):
    """All set partitions (Bell enumeration)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for smaller in _set_partitions(rest):
        for i in range(len(smaller)):
            yield smaller[:i] + [[first] + smaller[i]] + smaller[i + 1:]
        yield [[first]] + smaller


def _refines(fine, coarse_of):
    return all(len({coarse_of[n] for n in cl}) == 1 for cl in fine.clusters)


def test_coarsest_balanced_partition_on_random_digraphs():
    rng = np.random.default_rng(123)
    checked_exhaustively = 0
    for trial in range(50):
        spec = _random_network(rng, max_nodes=20 if trial % 2 else 7)
        p = coarsest_balanced_partition(spec)
        assert is_balanced(spec, p)

        # maximality: merging any two same-template clusters breaks balance
        for i, j in itertools.combinations(range(p.k), 2):
            a, b = p.clusters[i], p.clusters[j]
            if spec.nodes[a[0]] != spec.nodes[b[0]]:
                continue
            order = spec.node_ids()
            merged_cl = [cl for k, cl in enumerate(p.clusters)
                         if k not in (i, j)]
            merged_cl.append(tuple(sorted(a + b, key=order.index)))
            merged = Partition(tuple(merged_cl))
            assert not is_balanced(spec, merged)

        # exhaustive oracle on small instances: every balanced template-pure
        # partition refines the output (i.e. the output is coarsest)
        nodes = spec.node_ids()
        if len(nodes) <= 7:
            checked_exhaustively += 1
            coarse_of = p.cluster_of()
            for raw in _set_partitions(nodes):
                cand = Partition(tuple(tuple(cl) for cl in raw))
                if any(len({spec.nodes[n] for n in cl}) != 1
                       for cl in cand.clusters):
                    continue
                if is_balanced(spec, cand):
                    assert _refines(cand, coarse_of), (spec.source, cand)
    assert checked_exhaustively >= 20
