"""Sampled-domain contraction certificates.

A certificate records the maximum of a matrix measure of the Jacobian (or a
projected/blocked variant) over low-discrepancy samples of a box, with the
witnessing sample point.  Certificates are falsifiable evidence, not proofs:
reports always carry the box and sample count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from . import model as md
from .errors import CertifyError, SimulationError
from .measures import MeasureKind, matrix_measure
from .sampling import sample_box, time_grid
from .sim import convergence_rate
from .symmetry import partition_subspace

__all__ = [
    "ContractionCertificate", "CascadeCertificate", "certify_contraction",
    "certify_toward_subspace", "certify_hierarchical", "certify_cascade",
    "certify_second_order", "certify_virtual", "second_order_from_model",
    "estimate_contraction_rate",
]

DEFAULT_LAMBDA_MIN = 1e-6
DEFAULT_SAMPLES = 1000


@dataclass(frozen=True)
class ContractionCertificate:
    """Outcome of one sampled contraction check."""

    target: str
    kind: MeasureKind
    box: tuple                # ((lo, hi), ...) in sampling order
    samples: int
    max_mu: float
    lambda_min: float = DEFAULT_LAMBDA_MIN
    witness: object = None    # {"x": [...], "t": float}
    model_hash: str = ""
    details: object = None    # extra per-target figures (dict) or None

    @property
    def margin(self):
        return -self.max_mu

    @property
    def passed(self):
        return self.max_mu <= -self.lambda_min

    def report(self):
        out = {
            "target": self.target,
            "measure": self.kind.label(),
            "weight": None if self.kind.weight is None else self.kind.weight.tolist(),
            "box": [list(b) for b in self.box],
            "samples": self.samples,
            "max_mu": self.max_mu,
            "margin": self.margin,
            "status": "pass" if self.passed else "fail",
            "witness": self.witness,
            "model_hash": self.model_hash,
        }
        if self.details is not None:
            out["details"] = self.details
        return out


@dataclass(frozen=True)
class CascadeCertificate:
    """Chain of toward-subspace certificates over strictly nested
    poly-synchrony subspaces, outermost first."""

    stages: tuple  # dicts: partition clusters, subspace dim, certificate, invariance

    def __post_init__(self):
        dims = [s["dim"] for s in self.stages]
        if any(a <= b for a, b in zip(dims, dims[1:])):
            raise CertifyError(f"cascade subspaces are not strictly nested: dims {dims}")

    @property
    def passed(self):
        return all(s["certificate"].passed for s in self.stages)

    @property
    def margin(self):
        return min(s["certificate"].margin for s in self.stages)

    def failing_stage(self):
        for i, s in enumerate(self.stages):
            if not s["certificate"].passed:
                return i
        return None

    def report(self):
        return {
            "target": "cascade",
            "status": "pass" if self.passed else "fail",
            "margin": self.margin,
            "failing_stage": self.failing_stage(),
            "stages": [
                {
                    "partition": [list(cl) for cl in s["partition"]],
                    "dim": s["dim"],
                    "invariance_residual": s["invariance_residual"],
                    **s["certificate"].report(),
                }
                for s in self.stages
            ],
        }


# ---------------------------------------------------------------------------
# sampling plumbing
# ---------------------------------------------------------------------------

def _uses_time(e):
    if isinstance(e, ex.Time):
        return True
    if isinstance(e, ex.Unary):
        return _uses_time(e.child)
    if isinstance(e, ex.Bin):
        return _uses_time(e.left) or _uses_time(e.right)
    if isinstance(e, ex.Call):
        return e.fn in ex.TIME_BUILTINS or any(_uses_time(a) for a in e.args)
    return False


def is_time_varying(m):
    """True if the field (or any referenced input signal) depends on t."""
    exprs = list(m.field)
    exprs.extend(sig for sig in m.inputs.values() if sig is not None)
    return any(_uses_time(e) for e in exprs)


def _times(m, horizon):
    if horizon and horizon > 0:
        return time_grid(horizon)
    return np.array([0.0])


def _input_setup(m, input_box):
    """Append declared inputs as extra sampled coordinates."""
    input_box = input_box or {}
    names = sorted(input_box)
    for name in names:
        if name not in m.inputs:
            raise CertifyError(f"model '{m.name}' declares no input '{name}'")
    bounds = [tuple(input_box[name]) for name in names]
    return names, bounds


_CORNER_DIM_LIMIT = 10


def _sample_with_corners(bounds, samples, seed):
    """Low-discrepancy points plus, in low dimension, the exact box corners
    (extremal measure values frequently sit at corners)."""
    pts = sample_box(bounds, samples, seed=seed)
    if 0 < len(bounds) <= _CORNER_DIM_LIMIT:
        import itertools
        corners = np.array(list(itertools.product(*bounds)))
        pts = np.vstack([corners, pts])
    return pts


def _scan(J_fn, pts, times, reduce_fn):
    """Deterministic max over the sample grid; first strict improvement wins."""
    worst = -np.inf
    witness = None
    for x in pts:
        for t in times:
            try:
                val = reduce_fn(J_fn(float(t), x))
            except CertifyError:
                raise
            except Exception as exc:
                raise CertifyError(
                    f"Jacobian evaluation failed at x={np.round(x, 6).tolist()}, "
                    f"t={float(t):g}: {exc}")
            if not np.isfinite(val):
                raise CertifyError(
                    f"non-finite measure at x={np.round(x, 6).tolist()}, t={float(t):g}")
            if val > worst:
                worst = val
                witness = {"x": x.tolist(), "t": float(t)}
    return float(worst), witness


def _as_kind(kind):
    return kind if isinstance(kind, MeasureKind) else MeasureKind(kind)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

def certify_contraction(m, box=None, kind="two", samples=DEFAULT_SAMPLES,
                        lambda_min=DEFAULT_LAMBDA_MIN, horizon=0.0,
                        input_box=None, seed=0, target="full"):
    """Max of mu_kind(J(x, t)) over sampled states (and optionally inputs)."""
    kind = _as_kind(kind)
    in_names, in_bounds = _input_setup(m, input_box)
    J_fn = md.compile_jacobian(m, input_coords=in_names)
    bounds = tuple(m.box(box)) + tuple(in_bounds)
    pts = _sample_with_corners(bounds, samples, seed)
    times = _times(m, horizon)
    max_mu, witness = _scan(J_fn, pts, times, lambda A: matrix_measure(A, kind))
    return ContractionCertificate(target, kind, bounds, len(pts), max_mu,
                                  lambda_min, witness, m.model_hash())


def certify_toward_subspace(m, sub, box=None, kind="two",
                            samples=DEFAULT_SAMPLES,
                            lambda_min=DEFAULT_LAMBDA_MIN, horizon=0.0,
                            input_box=None, seed=0, target=None):
    """Max of mu_kind(V J(x, t) V^T) with V the subspace complement."""
    kind = _as_kind(kind)
    V = np.asarray(sub.complement, dtype=float)
    if V.shape[0] == 0:
        raise CertifyError("subspace complement is empty; nothing to certify")
    in_names, in_bounds = _input_setup(m, input_box)
    J_fn = md.compile_jacobian(m, input_coords=in_names)
    bounds = tuple(m.box(box)) + tuple(in_bounds)
    pts = _sample_with_corners(bounds, samples, seed)
    times = _times(m, horizon)
    max_mu, witness = _scan(
        J_fn, pts, times, lambda A: matrix_measure(V @ A @ V.T, kind))
    if target is None:
        target = f"toward-subspace(dim={sub.dim})"
    return ContractionCertificate(target, kind, bounds, samples, max_mu,
                                  lambda_min, witness, m.model_hash())


def _block_indices(m, blocks):
    idx = []
    seen = []
    for group in blocks:
        cur = [m.index(c) for c in group]
        idx.append(cur)
        seen.extend(cur)
    if sorted(seen) != list(range(m.n)):
        raise CertifyError("block grouping must cover every component exactly once")
    return idx


def _is_zero(e):
    return isinstance(e, ex.Num) and e.value == 0.0


def certify_hierarchical(m, blocks, box=None, kinds="two",
                         samples=DEFAULT_SAMPLES,
                         lambda_min=DEFAULT_LAMBDA_MIN, horizon=0.0,
                         input_box=None, seed=0, offdiag_bound=None):
    """Certify a block-triangular system: every diagonal block contracting
    (measures may differ per block) and the coupling block bounded on the box.

    The triangular sparsity is verified symbolically before any sampling;
    either orientation (lower or upper) is accepted.
    """
    idx = _block_indices(m, blocks)
    Jsym = md.jacobian(m)

    def all_zero(pairs):
        return all(_is_zero(Jsym[i][j]) for bi, bj in pairs
                   for i in idx[bi] for j in idx[bj])

    upper_pairs = [(a, b) for a in range(len(idx)) for b in range(len(idx)) if a < b]
    lower_pairs = [(a, b) for a in range(len(idx)) for b in range(len(idx)) if a > b]
    if all_zero(upper_pairs):
        orientation, coupling_pairs = "lower-triangular", lower_pairs
    elif all_zero(lower_pairs):
        orientation, coupling_pairs = "upper-triangular", upper_pairs
    else:
        raise CertifyError(
            "block grouping is not triangular: both off-diagonal sides are nonzero")

    if isinstance(kinds, (str, MeasureKind)):
        kinds = [kinds] * len(idx)
    if len(kinds) != len(idx):
        raise CertifyError("one measure kind per block is required")
    kinds = [_as_kind(k) for k in kinds]

    in_names, in_bounds = _input_setup(m, input_box)
    J_fn = md.compile_jacobian(m, input_coords=in_names)
    bounds = tuple(m.box(box)) + tuple(in_bounds)
    pts = _sample_with_corners(bounds, samples, seed)
    times = _times(m, horizon)

    block_reports = []
    max_mu = -np.inf
    witness = None
    offdiag_sup = 0.0
    for x in pts:
        for t in times:
            A = J_fn(float(t), x)
            for bi, bj in coupling_pairs:
                offdiag_sup = max(offdiag_sup,
                                  float(np.max(np.abs(A[np.ix_(idx[bi], idx[bj])]))))
    for b, rows in enumerate(idx):
        mu_b, wit_b = _scan(
            J_fn, pts, times,
            lambda A, rows=rows, k=kinds[b]: matrix_measure(A[np.ix_(rows, rows)], k))
        block_reports.append({
            "block": b, "components": list(blocks[b]),
            "measure": kinds[b].label(), "max_mu": mu_b,
            "status": "pass" if mu_b <= -lambda_min else "fail",
        })
        if mu_b > max_mu:
            max_mu, witness = mu_b, wit_b
    details = {
        "orientation": orientation,
        "blocks": block_reports,
        "offdiag_sup": offdiag_sup,
    }
    passed_bound = offdiag_bound is None or offdiag_sup <= offdiag_bound
    if offdiag_bound is not None:
        details["offdiag_bound"] = offdiag_bound
        details["offdiag_status"] = "pass" if passed_bound else "fail"
    if not passed_bound:
        max_mu = max(max_mu, 0.0)  # force overall fail if the bound is violated
    return ContractionCertificate("hierarchical", kinds[0], bounds, samples,
                                  max_mu, lambda_min, witness, m.model_hash(),
                                  details=details)


def certify_cascade(spec, partitions, box=None, kind="two",
                    samples=DEFAULT_SAMPLES, lambda_min=DEFAULT_LAMBDA_MIN,
                    horizon=0.0, seed=0, invariance_tol=1e-8):
    """Certify contraction toward a chain of nested poly-synchrony subspaces.

    ``partitions`` runs finest (largest subspace) to coarsest: the full model
    is certified toward the first subspace, then each quotient toward the
    next.  Flow invariance of each subspace is checked before certifying."""
    if not partitions:
        raise CertifyError("cascade needs at least one partition")
    ks = [p.k for p in partitions]
    if any(a <= b for a, b in zip(ks, ks[1:])):
        raise CertifyError(f"partitions must be strictly coarsening, got sizes {ks}")
    cur_spec = spec
    pending = list(partitions)
    stages = []
    for i in range(len(pending)):
        model = md.assemble_network(cur_spec)
        p = pending[i]
        p.validate(cur_spec)
        sub = partition_subspace(model, p)
        inv = md.check_flow_invariance(model, sub, box=box)
        if inv["max_residual"] > invariance_tol:
            raise CertifyError(
                f"stage {i + 1} subspace is not flow-invariant "
                f"(residual {inv['max_residual']:.3e})")
        cert = certify_toward_subspace(
            model, sub, box=box, kind=kind, samples=samples,
            lambda_min=lambda_min, horizon=horizon, seed=seed,
            target=f"stage-{i + 1}-toward-{p.k}-clusters")
        stages.append({
            "partition": p.clusters,
            "dim": sub.dim,
            "invariance_residual": inv["max_residual"],
            "certificate": cert,
        })
        if i + 1 < len(pending):
            cur_spec = md.quotient_network(cur_spec, p)
            pending[i + 1:] = [md.lift_partition(q, p) for q in pending[i + 1:]]
    return CascadeCertificate(tuple(stages))


# ---------------------------------------------------------------------------
# second-order specialization
# ---------------------------------------------------------------------------

def _check_ratio_shape(phi, xname, uname, tol=1e-9):
    """phi must depend on (x, u) only through the ratio u/x: verified by
    scale invariance phi(c x, c u) = phi(x, u) on sampled points."""
    free = ex.free_names(phi)
    extra = free - {xname, uname}
    if extra:
        raise CertifyError(
            f"phi may reference only '{xname}' and '{uname}', got {sorted(extra)}")
    pts = sample_box([(0.5, 8.0), (0.5, 8.0), (0.25, 4.0)], 64)
    for x, u, c in pts:
        a = ex.evaluate(phi, ex.Environment(values={xname: x, uname: u}))
        b = ex.evaluate(phi, ex.Environment(values={xname: c * x, uname: c * u}))
        if abs(a - b) > tol * (1.0 + abs(a)):
            raise CertifyError(
                f"phi is not a function of {uname}/{xname}: "
                f"phi({x:.3g},{u:.3g})={a:.6g} but scaled by {c:.3g} gives {b:.6g}")


def certify_second_order(eps, phi, box, samples=DEFAULT_SAMPLES,
                         xname="x", uname="u", seed=0):
    """Damped-oscillation contraction condition for the two-state reduction:
    requires inf over the box of (d phi/d x) * x + 1/(2 eps) > 0.

    ``box`` maps the state and input names to (lo, hi).  For phi = u/x the
    condition is equivalent to x > 2 eps u, reported in the details."""
    if eps <= 0:
        raise CertifyError("eps must be positive")
    if isinstance(phi, str):
        phi = ex.parse_expression(phi)
    _check_ratio_shape(phi, xname, uname)
    dphidx = ex.differentiate(phi, xname)
    bounds = (tuple(box[xname]), tuple(box[uname]))
    pts = _sample_with_corners(bounds, samples, seed)
    worst = np.inf
    witness = None
    for x, u in pts:
        env = ex.Environment(values={xname: x, uname: u})
        val = ex.evaluate(dphidx, env) * x + 1.0 / (2.0 * eps)
        if val < worst:
            worst = float(val)
            witness = {"x": [x, u], "t": 0.0}
    details = {"eps": eps, "phi": ex.render(phi), "inf_condition": worst}
    ratio = ex.Bin("/", ex.Var(uname), ex.Var(xname))
    if phi == ratio:
        details["equivalent_threshold"] = (
            f"{xname} > {2.0 * eps:g}*{uname} over the box")
    # map to the shared certificate shape: margin = inf of the condition
    return ContractionCertificate(
        "second-order", MeasureKind("two"), bounds, samples,
        max_mu=-worst, lambda_min=1e-12, witness=witness, details=details)


def second_order_from_model(m, xname="x", yname="y", uname="u"):
    """Extract (eps, phi) from a two-state model of the shape
    d/dt y = (phi - y)/eps (or (1/eps)*(phi - y)), with phi over (x, u)."""
    if set(m.states) != {xname, yname}:
        raise CertifyError(
            f"expected a two-state model over ({xname}, {yname}), got {m.states}")
    e = m.field[m.index(yname)]

    def param_value(node):
        if isinstance(node, ex.Num):
            return node.value
        if isinstance(node, ex.Var) and node.key in m.params:
            return float(m.params[node.key])
        return None

    eps = None
    body = None
    if isinstance(e, ex.Bin) and e.op == "/":
        eps = param_value(e.right)
        body = e.left
    elif isinstance(e, ex.Bin) and e.op == "*":
        for a, b in ((e.left, e.right), (e.right, e.left)):
            if (isinstance(a, ex.Bin) and a.op == "/"
                    and isinstance(a.left, ex.Num) and a.left.value == 1.0):
                val = param_value(a.right)
                if val is not None:
                    eps, body = val, b
    if eps is None or body is None:
        raise CertifyError(
            f"d/dt {yname} is not of the shape (phi - {yname})/eps")
    if not (isinstance(body, ex.Bin) and body.op == "-"
            and body.right == ex.Var(yname)):
        raise CertifyError(
            f"d/dt {yname} is not of the shape (phi - {yname})/eps")
    phi = ex.substitute(body.left, {k: float(v) for k, v in m.params.items()})
    return eps, phi


# ---------------------------------------------------------------------------
# virtual systems
# ---------------------------------------------------------------------------

def certify_virtual(v, real, instances, box=None, input_box=None, kind="two",
                    samples=DEFAULT_SAMPLES, lambda_min=DEFAULT_LAMBDA_MIN,
                    horizon=0.0, consistency_samples=200,
                    consistency_tol=1e-10, seed=0):
    """Two-part certificate for a virtual system ``v`` observing ``real``.

    Part (a), consistency: for every instance binding (v component -> real
    component), evaluating v with its state and inputs replaced by the bound
    real components reproduces the corresponding rows of the real field.
    Part (b): contraction of v in its own state, uniformly over sampled
    values of its declared inputs.
    """
    kind = _as_kind(kind)
    externals = [name for name, sig in v.inputs.items() if sig is None]
    # an external of v carried under the same name by the real model is a
    # shared exogenous signal: it needs no binding and is sampled instead
    shared = [name for name in externals
              if name in real.inputs and real.inputs[name] is None]
    shared_box = {name: tuple((input_box or {}).get(name, (0.5, 5.0)))
                  for name in shared}
    for inst in instances:
        missing = [s for s in list(v.states) + externals
                   if s not in inst and s not in shared]
        if missing:
            raise CertifyError(f"instance binding missing entries for {missing}")
        for tgt in inst.values():
            real.index(tgt)

    real_pts = sample_box(real.box(box), consistency_samples, seed=seed)
    shared_pts = (sample_box([shared_box[name] for name in shared],
                             consistency_samples, seed=seed + 1)
                  if shared else None)
    times = _times(real, horizon)
    worst = 0.0
    worst_witness = None
    for pi, xr in enumerate(real_pts):
        base = dict(zip(real.states, xr))
        base.update(real.params)
        if shared:
            base.update(zip(shared, shared_pts[pi]))
        for t in times:
            env_r = ex.Environment(values=base, t=float(t))
            try:
                f_rows = {s: ex.evaluate(e, env_r)
                          for s, e in zip(real.states, real.field)}
                for inst in instances:
                    vals = dict(v.params)
                    for name in shared:
                        if name not in inst:
                            vals[name] = base[name]
                    for vsym, tgt in inst.items():
                        vals[vsym] = base[tgt]
                    env_v = ex.Environment(values=vals, t=float(t))
                    for vs, e in zip(v.states, v.field):
                        r = abs(ex.evaluate(e, env_v) - f_rows[inst[vs]])
                        if r > worst:
                            worst = float(r)
                            worst_witness = {"x": xr.tolist(), "t": float(t),
                                             "component": inst[vs]}
            except CertifyError:
                raise
            except Exception as exc:
                raise CertifyError(
                    f"consistency evaluation failed at x="
                    f"{np.round(xr, 6).tolist()}: {exc}")
    consistent = worst <= consistency_tol

    # part (b): v contracting in its own state, uniformly over its inputs
    vbox = {}
    ibox = dict(input_box or {})
    for inst in instances:
        for vsym, tgt in inst.items():
            rng = dict(zip(real.states, real.box(box)))[tgt]
            if vsym in v.states:
                lo, hi = vbox.get(vsym, rng)
                vbox[vsym] = (min(lo, rng[0]), max(hi, rng[1]))
            elif vsym not in ibox:
                ibox[vsym] = rng
    for name in shared:
        ibox.setdefault(name, shared_box[name])
    contraction = certify_contraction(
        v, box=vbox, kind=kind, samples=samples, lambda_min=lambda_min,
        horizon=horizon, input_box=ibox, seed=seed, target="virtual-contraction")

    max_mu = contraction.max_mu if consistent else max(contraction.max_mu, 0.0)
    details = {
        "consistency_residual": worst,
        "consistency_status": "pass" if consistent else "fail",
        "consistency_witness": worst_witness,
        "contraction": contraction.report(),
    }
    return ContractionCertificate(
        "virtual", kind, contraction.box, samples, max_mu, lambda_min,
        contraction.witness, real.model_hash(), details=details)


# ---------------------------------------------------------------------------
# empirical rates
# ---------------------------------------------------------------------------

def estimate_contraction_rate(traj_a, traj_b, window=None, floor=1e-14):
    """Fitted exponential rate of ||x_a(t) - x_b(t)|| decay; the fit window
    is truncated automatically once the distance falls below the floor."""
    if traj_a.states != traj_b.states:
        raise CertifyError("trajectories describe different components")
    t = traj_a.t
    xb = traj_b.x if np.array_equal(traj_b.t, t) else traj_b.at(t)
    d = np.max(np.abs(traj_a.x - xb), axis=1)
    above = np.nonzero(d > floor)[0]
    if len(above) < 2:
        raise CertifyError("trajectory distance underflow: nothing to fit")
    t, d = t[: above[-1] + 1], d[: above[-1] + 1]
    try:
        return convergence_rate(t, d, window=window, floor=floor)
    except SimulationError as exc:
        raise CertifyError(str(exc))
