"""Symmetry actions, fixed-point subspaces, and equivariance checks.

A linear action ``g`` with ``g f(x,t) = f(g x, t)`` leaves the subspace
``M = {x : g x = x}`` flow-invariant; contraction toward M then forces every
trajectory onto a g-symmetric solution.  This module builds M and an
orthonormal basis V of its complement, and verifies the equivariance
identities numerically on sampled boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from . import model as md
from .errors import ModelError, SymconError
from .sampling import sample_box

__all__ = [
    "LinearAction", "ScalingActionPair", "Subspace", "SpatioTemporalAction",
    "build_action", "fixed_subspace", "complement_basis", "check_equivariance",
    "check_input_equivariance", "subspace_intersection", "action_order",
    "h_symmetry_residual", "partition_subspace",
]

_ORTHO_TOL = 1e-10
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class LinearAction:
    """Dense linear operator on the flattened state space."""

    matrix: object  # (n, n) ndarray
    name: str = ""
    order: int | None = None  # smallest p with gamma^p = I, when known

    def __post_init__(self):
        g = np.asarray(self.matrix, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ModelError("action matrix must be square")
        object.__setattr__(self, "matrix", g)
        if self.order is not None:
            err = np.max(np.abs(np.linalg.matrix_power(g, self.order) - np.eye(len(g))))
            if err > 1e-12:
                raise ModelError(
                    f"declared order {self.order} violated (residual {err:.2e})")

    @property
    def n(self):
        return self.matrix.shape[0]

    def __call__(self, x):
        return self.matrix @ np.asarray(x, dtype=float)


@dataclass(frozen=True)
class ScalingActionPair:
    """State action (expression map per component) paired with an input
    action, as in gamma f(x, u, t) = f(gamma x, rho u, t)."""

    model: object                 # SystemModel the maps are expressed over
    state_map: tuple              # ((component, Expr), ...) identity if absent
    input_map: tuple              # ((input name, Expr), ...)
    name: str = ""

    def _env(self, x, u=None, t=0.0):
        vals = dict(zip(self.model.states, np.asarray(x, dtype=float)))
        vals.update(self.model.params)
        if u:
            vals.update(u)
        return ex.Environment(values=vals, t=t)

    def apply_state(self, x, t=0.0):
        env = self._env(x, t=t)
        out = np.asarray(x, dtype=float).copy()
        for comp, e in self.state_map:
            out[self.model.index(comp)] = ex.evaluate(e, env)
        return out

    def apply_input(self, u, x=None, t=0.0):
        env = self._env(x if x is not None else np.zeros(self.model.n), u, t)
        out = dict(u)
        for name, e in self.input_map:
            out[name] = ex.evaluate(e, env)
        return out

    def state_jacobian(self):
        """Symbolic d gamma / d x as an (n, n) nested list of expressions."""
        n = self.model.n
        mapped = {comp: e for comp, e in self.state_map}
        rows = []
        for comp in self.model.states:
            e = mapped.get(comp, ex.Var(comp))
            rows.append([ex.differentiate(e, s) for s in self.model.states])
        return rows

    def identity_components(self):
        """Components left untouched by the state action (shared outputs)."""
        mapped = {comp for comp, e in self.state_map if e != ex.Var(comp)}
        return [s for s in self.model.states if s not in mapped]


@dataclass(frozen=True)
class Subspace:
    """Orthonormal basis of an invariant subspace and of its complement."""

    basis: object        # (p, n) rows spanning M
    complement: object   # (n-p, n) rows spanning M-perp

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.basis, dtype=float))
        V = np.atleast_2d(np.asarray(self.complement, dtype=float))
        if B.size == 0:
            B = B.reshape(0, V.shape[1])
        if V.size == 0:
            V = V.reshape(0, B.shape[1])
        object.__setattr__(self, "basis", B)
        object.__setattr__(self, "complement", V)
        n = self.n
        if B.shape[0] + V.shape[0] != n:
            raise ModelError(f"basis ({B.shape}) + complement ({V.shape}) != dimension {n}")
        for M, label in ((B, "basis"), (V, "complement")):
            if M.shape[0] and np.max(np.abs(M @ M.T - np.eye(M.shape[0]))) > _ORTHO_TOL:
                raise ModelError(f"subspace {label} rows are not orthonormal")
        if B.shape[0] and V.shape[0] and np.max(np.abs(B @ V.T)) > _ORTHO_TOL:
            raise ModelError("subspace basis and complement are not orthogonal")

    @property
    def n(self):
        return max(self.basis.shape[1], self.complement.shape[1])

    @property
    def dim(self):
        return self.basis.shape[0]


@dataclass(frozen=True)
class SpatioTemporalAction:
    """Pair (gamma, T) asserting x(t) = gamma x(t + T) on solutions."""

    gamma: LinearAction
    period_shift: float

    def __post_init__(self):
        if self.period_shift <= 0:
            raise ModelError("period shift must be positive")


# ---------------------------------------------------------------------------
# constructing actions from declarations
# ---------------------------------------------------------------------------

def _permutation_matrix(m, decl, spec=None):
    """Permutation over nodes (network) or state names (flat system)."""
    n = m.n
    idx = {s: i for i, s in enumerate(m.states)}

    def node_components(tag):
        pref = f"{tag}."
        comps = [s for s in m.states if s.startswith(pref)]
        if comps:
            return comps
        if tag in idx:
            return [tag]
        raise ModelError(f"action '{decl.name}': unknown node or state '{tag}'")

    g = np.zeros((n, n))
    moved = set()
    for cyc in decl.cycles:
        k = len(cyc)
        for a_pos in range(k):
            a, b = cyc[a_pos], cyc[(a_pos + 1) % k]
            ca, cb = node_components(a), node_components(b)
            if len(ca) != len(cb):
                raise ModelError(
                    f"action '{decl.name}': '{a}' and '{b}' have different dimensions")
            for sa, sb in zip(ca, cb):
                g[idx[sb], idx[sa]] = 1.0
                moved.add(idx[sb])
    for i in range(n):
        if i not in moved:
            g[i, i] = 1.0
    # sanity: a permutation matrix has one unit entry per row and column
    if not (np.allclose(g.sum(axis=0), 1.0) and np.allclose(g.sum(axis=1), 1.0)):
        raise ModelError(f"action '{decl.name}': cycles are not a permutation")
    return g


def build_action(m, decl):
    """Materialize a declaration from the model file against a flattened
    model: LinearAction for permute/matrix, ScalingActionPair for map."""
    if isinstance(decl, str):
        if decl not in m.actions:
            raise ModelError(f"model '{m.name}' declares no action '{decl}'")
        decl = m.actions[decl]
    if isinstance(decl, md.PermuteAction):
        return LinearAction(_permutation_matrix(m, decl), name=decl.name)
    if isinstance(decl, md.MatrixAction):
        g = np.array(decl.matrix, dtype=float)
        if g.shape != (m.n, m.n):
            raise ModelError(
                f"action '{decl.name}' matrix shape {g.shape} != model dimension {m.n}")
        return LinearAction(g, name=decl.name)
    if isinstance(decl, md.MapAction):
        for comp, _ in decl.state_map:
            m.index(comp)
        for name, _ in decl.input_map:
            if name not in m.inputs:
                raise ModelError(f"action '{decl.name}' maps undeclared input '{name}'")
        return ScalingActionPair(m, decl.state_map, decl.input_map, name=decl.name)
    raise ModelError(f"unknown action declaration {decl!r}")


# ---------------------------------------------------------------------------
# subspaces
# ---------------------------------------------------------------------------

def _fix_signs(M):
    """Deterministic row orientation: largest-magnitude entry positive."""
    M = M.copy()
    for i, row in enumerate(M):
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            M[i] = -row
    return M


def _orthonormal_rows(M):
    """Row space basis via SVD with the fixed rank threshold."""
    if M.shape[0] == 0:
        return M
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    rank = int(np.sum(s > _RANK_TOL * max(s[0], 1.0)))
    return _fix_signs(vt[:rank])


def complement_basis(B):
    """Orthonormal basis of the orthogonal complement of the row space of B.
    Deterministic Householder completion of [B^T | I]."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    p, n = B.shape
    if p and np.max(np.abs(B @ B.T - np.eye(p))) > _ORTHO_TOL:
        raise ModelError("complement_basis: rows of B are not orthonormal")
    if p == 0:
        return _fix_signs(np.eye(n))
    q, _ = np.linalg.qr(np.hstack([B.T, np.eye(n)]), mode="reduced")
    return _fix_signs(q[:, p:n].T)


def subspace_from_basis(B, n=None):
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.size == 0 and n is not None:
        B = B.reshape(0, n)
    return Subspace(B, complement_basis(B) if B.shape[1] else B)


def fixed_subspace(gamma):
    """M = ker(gamma - I) via a rank-revealing factorization, together with
    an orthonormal complement."""
    g = gamma.matrix if isinstance(gamma, LinearAction) else np.asarray(gamma, dtype=float)
    n = g.shape[0]
    u, s, vt = np.linalg.svd(g - np.eye(n))
    thresh = _RANK_TOL * max(s[0] if len(s) else 1.0, 1.0)
    # rows of vt beyond the numerical rank span the kernel
    rank = int(np.sum(s > thresh))
    B = _fix_signs(vt[rank:])
    if B.shape[0] == 0:
        B = np.zeros((0, n))
    return Subspace(B, complement_basis(B) if B.shape[0] else _fix_signs(np.eye(n)))


def partition_subspace(m, p):
    """Poly-synchrony subspace of a partition over an assembled network
    model: components equal within each cluster."""
    idx = {s: i for i, s in enumerate(m.states)}
    rows = []
    for cl in p.clusters:
        comp_lists = []
        for node in cl:
            pref = f"{node}."
            comp_lists.append([idx[s] for s in m.states if s.startswith(pref)])
        dims = {len(c) for c in comp_lists}
        if len(dims) != 1:
            raise ModelError("cluster members have different dimensions")
        d = dims.pop()
        for j in range(d):
            row = np.zeros(m.n)
            for comps in comp_lists:
                row[comps[j]] = 1.0
            rows.append(row / np.sqrt(len(cl)))
    B = _fix_signs(np.array(rows))
    return Subspace(B, complement_basis(B))


def subspace_intersection(subspaces):
    """Intersection of subspaces as the joint kernel of stacked complements.
    Flags a trivial ({0}) intersection."""
    if not subspaces:
        raise ModelError("subspace_intersection needs at least one subspace")
    n = subspaces[0].n
    for s in subspaces:
        if s.n != n:
            raise ModelError("subspace dimensions do not match")
    if len(subspaces) == 1:
        return subspaces[0]
    stacked = np.vstack([s.complement for s in subspaces if s.complement.shape[0]])
    if stacked.size == 0:
        return subspace_from_basis(np.eye(n))
    u, sv, vt = np.linalg.svd(stacked, full_matrices=True)
    rank = int(np.sum(sv > _RANK_TOL * max(sv[0], 1.0)))
    B = _fix_signs(vt[rank:])
    return Subspace(B.reshape(-1, n), complement_basis(B) if B.shape[0] else _fix_signs(np.eye(n)))


def principal_angles(A, B):
    """Principal angles (radians) between the row spaces of A and B."""
    qa = _orthonormal_rows(np.atleast_2d(A))
    qb = _orthonormal_rows(np.atleast_2d(B))
    if qa.shape[0] != qb.shape[0]:
        return np.array([np.pi / 2])
    if qa.shape[0] == 0:
        return np.zeros(0)
    cos = np.clip(np.linalg.svd(qa @ qb.T, compute_uv=False), -1.0, 1.0)
    # arccos is ill-conditioned near 1; recover small angles from the
    # sine-based formula (singular values of the projection residual)
    sin = np.sort(np.linalg.svd(qb - (qb @ qa.T) @ qa, compute_uv=False))
    sin = np.clip(sin[: len(cos)], 0.0, 1.0)
    return np.where(cos ** 2 > 0.5, np.arcsin(sin), np.arccos(cos))


def action_order(gamma, max_order=64):
    """Smallest p <= max_order with ||gamma^p - I||_inf <= 1e-10."""
    if max_order < 1:
        raise ModelError("max_order must be >= 1")
    g = gamma.matrix if isinstance(gamma, LinearAction) else np.asarray(gamma, dtype=float)
    acc = np.eye(g.shape[0])
    for p in range(1, max_order + 1):
        acc = acc @ g
        if np.max(np.abs(acc - np.eye(g.shape[0]))) <= 1e-10:
            return p
    raise ModelError(f"no order <= {max_order}: action is not finite-order")


# ---------------------------------------------------------------------------
# equivariance checks
# ---------------------------------------------------------------------------

def _sample_points(m, samples, box, seed):
    return sample_box(m.box(box), samples, seed=seed)


def check_equivariance(m, gamma, samples=1000, box=None, tol=1e-9,
                       times=(0.0,), seed=0):
    """Residual of gamma f(x,t) = f(gamma x, t) over sampled points."""
    f = md.compile_field(m)
    g = gamma.matrix
    worst, witness = 0.0, None
    for x in _sample_points(m, samples, box, seed):
        for t in times:
            r = float(np.max(np.abs(g @ f(t, x) - f(t, g @ x))))
            if r > worst:
                worst, witness = r, (x.tolist(), t)
    return {"max_residual": worst, "passed": worst <= tol, "samples": samples,
            "witness": witness}


def _field_env(m, x, u, t):
    vals = dict(zip(m.states, np.asarray(x, dtype=float)))
    vals.update(m.params)
    vals.update(u)
    return ex.Environment(values=vals, t=t)


def _eval_field(m, x, u, t):
    env = _field_env(m, x, u, t)
    return np.array([ex.evaluate(e, env) for e in m.field])


def check_input_equivariance(m, pair, samples=400, box=None, input_box=None,
                             tol=1e-9, times=(0.0,), seed=0):
    """Residual of (d gamma/d x) f(x, u, t) = f(gamma(x), rho(u), t) over
    sampled states and inputs.  For linear scalings d gamma/d x is the
    constant diagonal, recovering the linear identity."""
    dG = pair.state_jacobian()
    # sample every exogenous signal; unmapped ones pass through the input
    # action unchanged (the action fixes them)
    input_names = [name for name, _ in pair.input_map]
    input_names += [name for name, sig in m.inputs.items()
                    if sig is None and name not in input_names]
    in_bounds = []
    for name in input_names:
        if input_box and name in input_box:
            in_bounds.append(tuple(input_box[name]))
        else:
            in_bounds.append((0.5, 5.0))
    pts = _sample_points(m, samples, box, seed)
    upts = sample_box(in_bounds, samples, seed=seed + 1)
    worst, witness = 0.0, None
    for x, urow in zip(pts, upts):
        u = dict(zip(input_names, urow))
        for t in times:
            env = _field_env(m, x, u, t)
            J = np.array([[ex.evaluate(e, env) for e in row] for row in dG])
            lhs = J @ _eval_field(m, x, u, t)
            gx = pair.apply_state(x, t)
            ru = pair.apply_input(u, x, t)
            rhs = _eval_field(m, gx, ru, t)
            r = float(np.max(np.abs(lhs - rhs)))
            if r > worst:
                worst, witness = r, (x.tolist(), u, t)
    return {"max_residual": worst, "passed": worst <= tol, "samples": samples,
            "witness": witness}


def h_symmetry_residual(traj, action):
    """Time series r(t) = ||x(t) - gamma x(t + T)||_inf on the trajectory
    grid, with x(t + T) from dense output."""
    T = action.period_shift
    if traj.t[-1] - traj.t[0] <= T:
        raise SymconError("trajectory horizon is shorter than the period shift")
    g = action.gamma.matrix
    ts, rs = [], []
    for k, t in enumerate(traj.t):
        if t + T > traj.t[-1]:
            break
        r = float(np.max(np.abs(traj.x[k] - g @ traj.at(t + T))))
        ts.append(t)
        rs.append(r)
    return np.array(ts), np.array(rs)
