import numpy as np
import pytest

import symcon.expr as ex
from symcon.certify import (
    CascadeCertificate, certify_cascade, certify_contraction,
    certify_hierarchical, certify_second_order, certify_toward_subspace,
    certify_virtual, estimate_contraction_rate, second_order_from_model,
)
from symcon.errors import CertifyError
from symcon.measures import MeasureKind, matrix_measure
from symcon.model import Partition, assemble_network, compile_jacobian, loads_model
from symcon.sim import SolverConfig, integrate
from symcon.symmetry import partition_subspace, subspace_from_basis

DECAY = "system decay\nstates\n  x\ndynamics\n  d/dt x = -x\n"
GROW = "system grow\nstates\n  x\ndynamics\n  d/dt x = x\n"


def _chain(k=1.0, n=4):
    edges = "\n".join(f"edge {i} <-> {i + 1} : diff" for i in range(1, n))
    nodes = "\n".join(f"node {i} : osc" for i in range(1, n + 1))
    text = f"""
network chain{n}
params
  k = {k}
template osc {{
  states x
  dynamics d/dt x = -x
}}
{nodes}
coupling diff(tail, head) = k*(tail - head)
{edges}
"""
    return loads_model(text)


# ---------------------------------------------------------------------------
# full-state certificates
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["one", "two", "inf"])
def test_pure_decay_margin_one(kind):
    cert = certify_contraction(loads_model(DECAY), kind=kind, samples=50)
    assert cert.passed
    assert cert.margin == pytest.approx(1.0, abs=1e-12)


def test_expanding_system_fails_with_witness():
    cert = certify_contraction(loads_model(GROW), samples=50)
    assert not cert.passed
    assert cert.max_mu == pytest.approx(1.0, abs=1e-12)
    assert cert.witness is not None


def test_witness_self_consistency():
    text = ("system cubic\nstates\n  x\ndomain\n  x in [-2, 2]\n"
            "dynamics\n  d/dt x = -x - x^3\n")
    m = loads_model(text)
    cert = certify_contraction(m, samples=200)
    J = compile_jacobian(m)
    w = cert.witness
    recomputed = matrix_measure(J(w["t"], np.array(w["x"])), cert.kind)
    assert abs(recomputed - cert.max_mu) <= 1e-12


def test_weighted_feedforward_certificate_with_dense_oracle():
    text = """
system ffl
params
  b2 = 1
states
  Y Z
inputs
  chi external
domain
  Y in [0.5, 10]
  Z in [0, 10]
dynamics
  d/dt Y = chi - Y
  d/dt Z = b2*chi/Y - Z
"""
    m = loads_model(text)
    theta = np.diag([1.0, 0.01])
    kind = MeasureKind("one", weight=theta)
    cert = certify_contraction(m, kind=kind, samples=1000,
                               input_box={"chi": (1.0, 10.0)})
    assert cert.passed
    # dense-grid oracle over the triangular Jacobian [[-1, 0], [-chi/Y^2, -1]]
    Ys = np.linspace(0.5, 10.0, 100)
    chis = np.linspace(1.0, 10.0, 100)
    oracle = max(
        matrix_measure(theta @ np.array([[-1.0, 0.0], [-c / y ** 2, -1.0]])
                       @ np.linalg.inv(theta), "one")
        for y in Ys for c in chis)
    assert oracle < 0
    assert cert.max_mu <= oracle + 1e-12


def test_pole_inside_box_reported():
    m = loads_model("system pole\nstates\n  x\ndomain\n  x in [-1, 1]\n"
                    "dynamics\n  d/dt x = -1/x\n")
    with pytest.raises(CertifyError, match="x="):
        certify_contraction(m, samples=200)


def test_time_sampling_catches_late_measure_growth():
    m = loads_model("system tv\nstates\n  x\ndynamics\n  d/dt x = (-2 + step(5))*x\n")
    early = certify_contraction(m, samples=20, horizon=0.0)
    late = certify_contraction(m, samples=20, horizon=10.0)
    assert early.max_mu == pytest.approx(-2.0, abs=1e-12)
    assert late.max_mu == pytest.approx(-1.0, abs=1e-12)


def test_report_shape():
    cert = certify_contraction(loads_model(DECAY), samples=10)
    rep = cert.report()
    assert rep["status"] == "pass"
    assert rep["measure"] == "2"
    assert rep["margin"] == pytest.approx(1.0)
    assert rep["samples"] == 12  # requested points plus the two box corners
    assert rep["model_hash"]


# ---------------------------------------------------------------------------
# toward-subspace certificates
# ---------------------------------------------------------------------------

def test_chain4_toward_pair_subspace_margin():
    m = assemble_network(_chain())
    sub = partition_subspace(m, Partition((("1", "4"), ("2", "3"))))
    cert = certify_toward_subspace(m, sub, kind="two", samples=50)
    assert cert.passed
    # projected Jacobian [[-2, 1], [1, -4]]: largest eigenvalue -3 + sqrt(2)
    assert cert.max_mu == pytest.approx(-3.0 + np.sqrt(2.0), abs=1e-9)


def test_quotient_chain_toward_sync():
    from symcon.model import quotient_system
    spec = _chain()
    q = quotient_system(spec, Partition((("1", "4"), ("2", "3"))))
    sub = partition_subspace(q, Partition((("1+4", "2+3"),)))
    cert = certify_toward_subspace(q, sub, kind="two", samples=50)
    assert cert.passed
    assert cert.max_mu == pytest.approx(-3.0, abs=1e-9)


def test_expanding_system_toward_subspace_fails():
    m = loads_model("system g2\nstates\n  x y\ndynamics\n"
                    "  d/dt x = x\n  d/dt y = y\n")
    sub = subspace_from_basis(np.array([[1.0, 1.0]]) / np.sqrt(2))
    cert = certify_toward_subspace(m, sub, samples=50)
    assert not cert.passed


def test_full_subspace_rejected():
    m = loads_model(DECAY)
    sub = subspace_from_basis(np.array([[1.0]]))
    with pytest.raises(CertifyError, match="complement"):
        certify_toward_subspace(m, sub)


# ---------------------------------------------------------------------------
# hierarchical certificates
# ---------------------------------------------------------------------------

def test_hierarchical_triangular_pass():
    m = loads_model("system h\nstates\n  a b\ndynamics\n"
                    "  d/dt a = -a\n  d/dt b = -b + 2*a\n")
    cert = certify_hierarchical(m, [["a"], ["b"]], samples=50)
    assert cert.passed
    assert cert.details["orientation"] == "lower-triangular"
    assert cert.details["offdiag_sup"] == pytest.approx(2.0)
    assert all(b["status"] == "pass" for b in cert.details["blocks"])


def test_hierarchical_upper_orientation():
    m = loads_model("system h\nstates\n  a b\ndynamics\n"
                    "  d/dt a = -a + 3*b\n  d/dt b = -b\n")
    cert = certify_hierarchical(m, [["a"], ["b"]], samples=50)
    assert cert.details["orientation"] == "upper-triangular"


def test_hierarchical_fully_coupled_rejected():
    m = loads_model("system h\nstates\n  a b\ndynamics\n"
                    "  d/dt a = -a + b\n  d/dt b = -b + a\n")
    with pytest.raises(CertifyError, match="triangular"):
        certify_hierarchical(m, [["a"], ["b"]])


def test_hierarchical_diagonal_system():
    m = loads_model("system h\nstates\n  a b\ndynamics\n"
                    "  d/dt a = -a\n  d/dt b = -2*b\n")
    cert = certify_hierarchical(m, [["a"], ["b"]], samples=50)
    assert cert.passed
    assert cert.details["offdiag_sup"] == 0.0


def test_hierarchical_offdiag_bound_enforced():
    m = loads_model("system h\nstates\n  a b\ndynamics\n"
                    "  d/dt a = -a\n  d/dt b = -b + 2*a\n")
    cert = certify_hierarchical(m, [["a"], ["b"]], samples=50, offdiag_bound=1.0)
    assert not cert.passed
    assert cert.details["offdiag_status"] == "fail"


def test_hierarchical_mixed_measures():
    m = loads_model("system h\nstates\n  a b c\ndynamics\n"
                    "  d/dt a = -a - b\n  d/dt b = a - b\n  d/dt c = -c + a\n")
    cert = certify_hierarchical(m, [["a", "b"], ["c"]], kinds=["two", "one"],
                                samples=50)
    assert cert.passed  # rotation block contracts in 2-norm


# ---------------------------------------------------------------------------
# cascades
# ---------------------------------------------------------------------------

def _chain4_partitions():
    return [Partition((("1", "4"), ("2", "3"))),
            Partition((("1", "2", "3", "4"),))]


def test_chain4_cascade_passes():
    cert = certify_cascade(_chain(), _chain4_partitions(), kind="two", samples=50)
    assert isinstance(cert, CascadeCertificate)
    assert cert.passed
    assert cert.failing_stage() is None
    # stage margins: 3 - sqrt(2) toward the pair subspace, 3 on the quotient
    assert cert.stages[0]["certificate"].margin == pytest.approx(3 - np.sqrt(2), abs=1e-9)
    assert cert.stages[1]["certificate"].margin == pytest.approx(3.0, abs=1e-9)
    assert cert.margin >= 1.0


def test_chain4_repulsive_cascade_fails_at_stage_one():
    cert = certify_cascade(_chain(k=-1.0), _chain4_partitions(), kind="two",
                           samples=50)
    assert not cert.passed
    assert cert.failing_stage() == 0


def test_cascade_scalar_equivalence():
    """The cascade passes exactly when the scalar difference dynamics
    d/dt x = g(x) - h(x) is contracting, in both directions."""
    for k, expect in ((1.0, True), (-1.0, False)):
        cascade = certify_cascade(_chain(k=k), _chain4_partitions(),
                                  kind="two", samples=50)
        scalar = loads_model(
            f"system diffdyn\nparams\n  k = {k}\nstates\n  x\n"
            "dynamics\n  d/dt x = -x - k*x\n")
        direct = certify_contraction(scalar, samples=50)
        assert cascade.passed is expect
        assert direct.passed is expect


def test_chain8_cascade():
    spec = _chain(n=8)
    mirror = Partition((("1", "8"), ("2", "7"), ("3", "6"), ("4", "5")))
    full = Partition((tuple(str(i) for i in range(1, 9)),))
    cert = certify_cascade(spec, [mirror, full], kind="two", samples=50)
    assert cert.passed
    assert cert.margin >= 1.0


def test_cascade_nesting_enforced():
    with pytest.raises(CertifyError, match="coarsening"):
        certify_cascade(_chain(), list(reversed(_chain4_partitions())))


# ---------------------------------------------------------------------------
# second-order condition
# ---------------------------------------------------------------------------

def test_second_order_ratio_pass():
    cert = certify_second_order(0.1, "u/x", {"x": (1.0, 10.0), "u": (1.0, 4.0)})
    assert cert.passed
    # condition inf: -u/x + 1/(2 eps) = 5 - 4 at the worst corner
    assert cert.details["inf_condition"] == pytest.approx(1.0, abs=0.05)
    assert "equivalent_threshold" in cert.details


def test_second_order_ratio_fail():
    cert = certify_second_order(0.1, "u/x", {"x": (0.1, 0.5), "u": (1.0, 4.0)})
    assert not cert.passed


def test_second_order_arctan_pass():
    cert = certify_second_order(0.05, "arctan(u/x)",
                                {"x": (1.0, 10.0), "u": (1.0, 4.0)})
    assert cert.passed


def test_second_order_shape_check():
    with pytest.raises(CertifyError, match="function of u/x"):
        certify_second_order(0.1, "u/x + x", {"x": (1.0, 2.0), "u": (1.0, 2.0)})
    with pytest.raises(CertifyError, match="reference"):
        certify_second_order(0.1, "u/x + w", {"x": (1.0, 2.0), "u": (1.0, 2.0)})
    with pytest.raises(CertifyError, match="eps"):
        certify_second_order(-0.1, "u/x", {"x": (1.0, 2.0), "u": (1.0, 2.0)})


def test_second_order_from_model():
    text = """
system chemo
params
  eps = 0.1
states
  x y
inputs
  u external
dynamics
  d/dt x = x*(y - 1)
  d/dt y = (u/x - y)/eps
"""
    eps, phi = second_order_from_model(loads_model(text))
    assert eps == 0.1
    assert phi == ex.parse_expression("u/x")
    bad = loads_model(text.replace("(u/x - y)/eps", "u/x - y"))
    with pytest.raises(CertifyError, match="shape"):
        second_order_from_model(bad)


# ---------------------------------------------------------------------------
# virtual systems
# ---------------------------------------------------------------------------

QUORUM_REAL = """
system quorum3
params
  K = 1
states
  x1 x2 x3 z
dynamics
  d/dt x1 = -x1 + K*(z - x1)
  d/dt x2 = -x2 + K*(z - x2)
  d/dt x3 = -x3 + K*(z - x3)
  d/dt z = -z + (K/3)*((x1 - z) + (x2 - z) + (x3 - z))
"""

QUORUM_VIRTUAL = """
system vquorum
params
  K = 1
states
  y
inputs
  z external
dynamics
  d/dt y = -y + K*(z - y)
"""


def test_virtual_quorum_certificate():
    real = loads_model(QUORUM_REAL)
    v = loads_model(QUORUM_VIRTUAL)
    instances = [{"y": f"x{i}", "z": "z"} for i in (1, 2, 3)]
    cert = certify_virtual(v, real, instances, samples=100)
    assert cert.passed
    assert cert.details["consistency_residual"] <= 1e-10
    # d/dt y has slope -(1 + K) in y
    assert cert.max_mu == pytest.approx(-2.0, abs=1e-9)


def test_virtual_trivial_self():
    m = loads_model(DECAY)
    cert = certify_virtual(m, m, [{"x": "x"}], samples=50)
    assert cert.passed
    assert cert.details["consistency_residual"] == 0.0


def test_virtual_inconsistent_fails():
    real = loads_model(QUORUM_REAL)
    v = loads_model(QUORUM_VIRTUAL.replace("K*(z - y)", "2*K*(z - y)"))
    instances = [{"y": "x1", "z": "z"}]
    cert = certify_virtual(v, real, instances, samples=50)
    assert not cert.passed
    assert cert.details["consistency_status"] == "fail"
    assert cert.details["consistency_witness"] is not None


def test_virtual_binding_validated():
    real = loads_model(QUORUM_REAL)
    v = loads_model(QUORUM_VIRTUAL)
    with pytest.raises(CertifyError, match="missing"):
        certify_virtual(v, real, [{"y": "x1"}])


# ---------------------------------------------------------------------------
# empirical rate estimation
# ---------------------------------------------------------------------------

def test_rate_estimate_closed_form():
    m = loads_model("system d2\nstates\n  x\ndynamics\n  d/dt x = -2*x\n")
    cfg = SolverConfig(horizon=5.0, rtol=1e-10, atol=1e-13)
    a = integrate(m, [1.0], cfg)
    b = integrate(m, [3.0], cfg)
    rate = estimate_contraction_rate(a, b)
    assert rate == pytest.approx(2.0, rel=0.01)


def test_rate_estimate_underflow():
    m = loads_model(DECAY)
    cfg = SolverConfig(horizon=5.0)
    a = integrate(m, [1.0], cfg)
    with pytest.raises(CertifyError, match="underflow"):
        estimate_contraction_rate(a, a)


def test_contraction_envelope_soundness():
    """Full-state certificate margin bounds the pairwise decay envelope."""
    m = assemble_network(_chain())
    cert = certify_contraction(m, kind="two", samples=100)
    lam = cert.margin
    assert lam == pytest.approx(1.0, abs=1e-9)
    cfg = SolverConfig(horizon=10.0, rtol=1e-10, atol=1e-13)
    rng = np.random.default_rng(2)
    for _ in range(20):
        xa = rng.uniform(-5, 5, 4)
        xb = rng.uniform(-5, 5, 4)
        ta = integrate(m, xa, cfg)
        tb = integrate(m, xb, cfg)
        d = np.max(np.abs(ta.x - tb.at(ta.t)), axis=1)
        envelope = np.max(np.abs(xa - xb)) * np.exp(-(lam - 0.05) * ta.t)
        # inf-norm distance can exceed its initial-norm envelope only by the
        # norm-equivalence constant; 2-norm contraction gives sqrt(n) slack
        assert np.all(d <= 2.0 * envelope + 1e-12)
