"""System/network model files, flattening, Jacobians, and synchrony partitions.

Model files (``.sysdl``) are UTF-8 and line oriented.  A flat system::

    system i1ffl
    params
      a1 = 1
    states
      Y Z
    inputs
      chi = 1 + step(10)
    dynamics
      d/dt Y = -a1*Y + chi
      d/dt Z = b2*chi/Y - a2*Z
    action scale map { Y -> Y/chimin, Z -> Z } input-map { chi -> chi/chimin }

A network::

    network chain4
    params
      k = 1
    template osc {
      states x
      dynamics d/dt x = -x
    }
    node 1 : osc
    coupling diff(tail, head) = k*(tail - head)
    edge 1 <-> 2 : diff
    action g2 permute (1 4)(2 3)

Coupling expressions see the endpoint states as ``tail.<s>`` / ``head.<s>``
(bare ``tail``/``head`` for one-state templates) plus parameters, inputs and
``t``.  ``<->`` is sugar for two directed edges.  ``on <comp>`` picks which
head component a coupling feeds (defaults to the single state).

Flattened state ordering is node order, then per-node component order, with
component keys ``<node>.<state>``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import ModelError, NonSmoothError, SymconError

__all__ = [
    "SystemModel", "NetworkSpec", "Partition", "load_model", "loads_model",
    "assemble_network", "jacobian", "coarsest_balanced_partition",
    "quotient_network", "quotient_system", "check_flow_invariance",
    "compile_field", "compile_jacobian", "ParamRamp",
]


# ---------------------------------------------------------------------------
# action declarations (syntactic; materialized by symcon.symmetry)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PermuteAction:
    name: str
    cycles: tuple  # tuple of tuples of node ids / state names


@dataclass(frozen=True)
class MatrixAction:
    name: str
    matrix: tuple  # row-major tuple of tuples


@dataclass(frozen=True)
class MapAction:
    name: str
    state_map: tuple  # ((component, Expr), ...) in declaration order
    input_map: tuple  # ((input, Expr), ...)


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------

@dataclass
class SystemModel:
    """Flattened ODE/DDE system.  ``states`` fixes the component order used
    by every vector, matrix and action in the toolkit."""

    name: str
    states: list
    params: dict
    inputs: dict          # name -> Expr (signal of t) or None (external)
    delays: dict          # name -> seconds
    domain: dict          # component -> (lo, hi)
    field: list           # Expr per state component
    actions: dict = field(default_factory=dict)
    source: str = ""

    @property
    def n(self):
        return len(self.states)

    @property
    def is_delayed(self):
        return any(ex.has_delayed(e) for e in self.field)

    def index(self, key):
        try:
            return self.states.index(key)
        except ValueError:
            raise ModelError(f"unknown state component '{key}' in model '{self.name}'")

    def model_hash(self):
        payload = self.source + json.dumps(self.params, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def box(self, overrides=None):
        """Per-component (lo, hi) bounds: declared domain, else [-5, 5]."""
        out = []
        overrides = overrides or {}
        for s in self.states:
            if s in overrides:
                out.append(tuple(overrides[s]))
            else:
                out.append(tuple(self.domain.get(s, (-5.0, 5.0))))
        return out

    def validate(self):
        declared = set(self.states) | set(self.params) | set(self.inputs)
        if len(self.field) != self.n:
            raise ModelError(
                f"model '{self.name}' has {self.n} states but {len(self.field)} equations")
        for s, e in zip(self.states, self.field):
            for name in ex.free_names(e):
                if name not in declared:
                    raise ModelError(f"undeclared name '{name}' in d/dt {s}")
            for d in _delay_names(e):
                if d not in self.delays:
                    raise ModelError(f"undeclared delay '{d}' in d/dt {s}")
        for name, sig in self.inputs.items():
            if sig is None:
                continue
            for ref in ex.free_names(sig):
                if ref not in self.params:
                    raise ModelError(
                        f"input '{name}' may only reference parameters and t, got '{ref}'")
        return self


@dataclass(frozen=True)
class Edge:
    tail: str
    head: str
    label: str


@dataclass
class Template:
    name: str
    states: list                  # local component names
    dynamics: dict                # local state -> Expr


@dataclass
class Coupling:
    label: str
    expr: object                  # Expr over tail.*, head.*, params, inputs, t
    target: str | None = None     # head component fed by this coupling


@dataclass
class NetworkSpec:
    name: str
    params: dict
    inputs: dict
    templates: dict               # template name -> Template
    nodes: dict                   # node id -> template name (insertion ordered)
    couplings: dict               # label -> Coupling
    edges: list
    domain: dict = field(default_factory=dict)
    actions: dict = field(default_factory=dict)
    source: str = ""

    def node_ids(self):
        return list(self.nodes)

    def template_of(self, node):
        return self.templates[self.nodes[node]]

    def in_edges(self, node):
        return [e for e in self.edges if e.head == node]

    def validate(self):
        for node, tmpl in self.nodes.items():
            if tmpl not in self.templates:
                raise ModelError(f"node '{node}' uses undeclared template '{tmpl}'")
        for e in self.edges:
            for end in (e.tail, e.head):
                if end not in self.nodes:
                    raise ModelError(f"edge references undeclared node '{end}'")
            if e.label not in self.couplings:
                raise ModelError(f"edge uses undeclared coupling '{e.label}'")
        # equivalent arrows must join equivalent endpoints
        by_label = {}
        for e in self.edges:
            sig = (self.nodes[e.tail], self.nodes[e.head])
            prev = by_label.setdefault(e.label, sig)
            if prev != sig:
                raise ModelError(
                    f"edges labelled '{e.label}' connect non-equivalent endpoints: "
                    f"{prev} vs {sig}")
        for c in self.couplings.values():
            heads = [e.head for e in self.edges if e.label == c.label]
            for h in heads:
                tmpl = self.template_of(h)
                target = c.target if c.target is not None else tmpl.states[0]
                if target not in tmpl.states:
                    raise ModelError(
                        f"coupling '{c.label}' targets '{target}' missing from "
                        f"template '{tmpl.name}'")
        return self


@dataclass(frozen=True)
class Partition:
    """Cluster assignment over network nodes.  ``clusters`` is a tuple of
    tuples of node ids, each sorted by node order; disjoint and covering."""

    clusters: tuple

    @property
    def k(self):
        return len(self.clusters)

    def cluster_of(self):
        out = {}
        for ci, cl in enumerate(self.clusters):
            for node in cl:
                out[node] = ci
        return out

    @staticmethod
    def from_assignment(assign, node_order):
        groups = {}
        for node in node_order:
            groups.setdefault(assign[node], []).append(node)
        clusters = sorted(groups.values(), key=lambda cl: node_order.index(cl[0]))
        return Partition(tuple(tuple(cl) for cl in clusters))

    def validate(self, spec):
        seen = set()
        for cl in self.clusters:
            if not cl:
                raise ModelError("partition contains an empty cluster")
            tmpls = {spec.nodes[n] for n in cl}
            if len(tmpls) != 1:
                raise ModelError(f"cluster {cl} mixes templates {sorted(tmpls)}")
            for n in cl:
                if n in seen:
                    raise ModelError(f"node '{n}' appears in more than one cluster")
                seen.add(n)
        if seen != set(spec.nodes):
            raise ModelError("partition does not cover all nodes exactly once")
        return self


def _delay_names(e, out=None):
    if out is None:
        out = set()
    if isinstance(e, ex.Delayed):
        out.add(e.delay)
    elif isinstance(e, ex.Unary):
        _delay_names(e.child, out)
    elif isinstance(e, ex.Bin):
        _delay_names(e.left, out)
        _delay_names(e.right, out)
    elif isinstance(e, ex.Call):
        for a in e.args:
            _delay_names(a, out)
    return out


# ---------------------------------------------------------------------------
# file parsing
# ---------------------------------------------------------------------------

_SECTIONS = {"params", "states", "inputs", "delays", "domain", "dynamics"}

_DYN_RE = re.compile(r"^d/dt\s+(\S+)\s*=\s*(.+)$")
_COUPLING_RE = re.compile(
    r"^coupling\s+(\w+)\s*\(\s*tail\s*,\s*head\s*\)\s*(?:on\s+(\w+)\s*)?=\s*(.+)$")
_EDGE_RE = re.compile(r"^edge\s+(\S+)\s*(->|<->)\s*(\S+)\s*:\s*(\w+)$")
_NODE_RE = re.compile(r"^node\s+(\S+)\s*:\s*(\w+)$")
_DOMAIN_RE = re.compile(r"^(\S+)\s+in\s+\[\s*([^,\]]+)\s*,\s*([^,\]]+)\s*\]$")
_ACTION_RE = re.compile(r"^action\s+(\w+)\s+(permute|matrix|map)\s+(.*)$", re.S)
_MAP_RE = re.compile(r"^\{(.*?)\}\s*(?:input-map\s*\{(.*?)\})?\s*$", re.S)


def _strip(line):
    return line.split("#", 1)[0].rstrip()


def _parse_param_value(text, params, lineno):
    try:
        e = ex.parse_expression(text)
        return ex.evaluate(e, ex.Environment(values=dict(params)))
    except SymconError as exc:
        raise ModelError(f"bad parameter value '{text}': {exc}", lineno)


def _parse_expr(text, lineno):
    try:
        return ex.parse_expression(text, line=lineno)
    except SymconError as exc:
        raise ModelError(f"bad expression: {exc}", lineno)


def _parse_action(name, kind, rest, lineno):
    rest = rest.strip()
    if kind == "permute":
        cycles = re.findall(r"\(([^()]*)\)", rest)
        if not cycles:
            raise ModelError(f"action '{name}': no cycles given", lineno)
        return PermuteAction(name, tuple(tuple(c.split()) for c in cycles))
    if kind == "matrix":
        try:
            rows = json.loads(rest)
            mat = tuple(tuple(float(v) for v in row) for row in rows)
        except (ValueError, TypeError):
            raise ModelError(f"action '{name}': bad matrix literal", lineno)
        return MatrixAction(name, mat)
    m = _MAP_RE.match(rest)
    if not m:
        raise ModelError(f"action '{name}': expected map {{ ... }}", lineno)

    def parse_arrows(body):
        out = []
        for piece in body.split(","):
            piece = piece.strip()
            if not piece:
                continue
            if "->" not in piece:
                raise ModelError(f"action '{name}': bad map entry '{piece}'", lineno)
            lhs, rhs = piece.split("->", 1)
            out.append((lhs.strip(), _parse_expr(rhs, lineno)))
        return tuple(out)

    return MapAction(name, parse_arrows(m.group(1)), parse_arrows(m.group(2) or ""))


def _parse_states_decl(tokens, lineno):
    out = []
    for tok in tokens:
        m = re.fullmatch(r"(\w+)(?:\[(\d+)\])?", tok)
        if not m:
            raise ModelError(f"bad state declaration '{tok}'", lineno)
        name, dim = m.group(1), m.group(2)
        if dim is None:
            out.append(name)
        else:
            out.extend(f"{name}[{i}]" for i in range(int(dim)))
    return out


def loads_model(text, name="model", params=None):
    """Parse model text; ``params`` overrides declared parameter values."""
    lines = text.split("\n")
    kind = None
    model_name = name
    sections = {s: [] for s in _SECTIONS}
    templates = {}
    nodes = {}
    couplings = {}
    edges = []
    actions = {}
    section = None

    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip(lines[i])
        i += 1
        s = line.strip()
        if not s:
            continue
        head = s.split()[0]
        if head in ("system", "network") and kind is None:
            kind = head
            parts = s.split()
            if len(parts) > 1:
                model_name = parts[1]
            continue
        if s in _SECTIONS:
            section = s
            continue
        if head == "template":
            m = re.match(r"^template\s+(\w+)\s*\{\s*$", s)
            if not m:
                raise ModelError("expected 'template <name> {'", lineno)
            tname = m.group(1)
            tstates, tdyn = [], {}
            while i < len(lines):
                tline = _strip(lines[i]).strip()
                tno = i + 1
                i += 1
                if not tline:
                    continue
                if tline == "}":
                    break
                if tline.startswith("states"):
                    tstates.extend(_parse_states_decl(tline.split()[1:], tno))
                    continue
                dm = _DYN_RE.match(tline.replace("dynamics", "", 1).strip()
                                   if tline.startswith("dynamics") else tline)
                if dm:
                    tdyn[dm.group(1)] = _parse_expr(dm.group(2), tno)
                    continue
                raise ModelError(f"unrecognized template line '{tline}'", tno)
            else:
                raise ModelError(f"template '{tname}' missing closing brace", lineno)
            missing = [st for st in tstates if st not in tdyn]
            if missing:
                raise ModelError(f"template '{tname}' missing dynamics for {missing}", lineno)
            templates[tname] = Template(tname, tstates, tdyn)
            section = None
            continue
        if head == "node":
            m = _NODE_RE.match(s)
            if not m:
                raise ModelError(f"bad node line '{s}'", lineno)
            if m.group(1) in nodes:
                raise ModelError(f"duplicate node '{m.group(1)}'", lineno)
            nodes[m.group(1)] = m.group(2)
            section = None
            continue
        if head == "coupling":
            m = _COUPLING_RE.match(s)
            if not m:
                raise ModelError(f"bad coupling line '{s}'", lineno)
            couplings[m.group(1)] = Coupling(m.group(1), _parse_expr(m.group(3), lineno),
                                             m.group(2))
            section = None
            continue
        if head == "edge":
            m = _EDGE_RE.match(s)
            if not m:
                raise ModelError(f"bad edge line '{s}'", lineno)
            tail, arrow, hd, label = m.groups()
            edges.append(Edge(tail, hd, label))
            if arrow == "<->":
                edges.append(Edge(hd, tail, label))
            section = None
            continue
        if head == "action":
            m = _ACTION_RE.match(s)
            if not m:
                raise ModelError(f"bad action line '{s}'", lineno)
            actions[m.group(1)] = _parse_action(m.group(1), m.group(2), m.group(3), lineno)
            section = None
            continue
        if section is None:
            raise ModelError(f"unexpected line '{s}'", lineno)
        sections[section].append((lineno, s))

    pvals = {}
    for lineno, s in sections["params"]:
        if "=" not in s:
            raise ModelError(f"bad parameter line '{s}'", lineno)
        pname, val = (p.strip() for p in s.split("=", 1))
        pvals[pname] = _parse_param_value(val, pvals, lineno)
    if params:
        for k, v in params.items():
            if k not in pvals:
                raise ModelError(f"override for undeclared parameter '{k}'")
            pvals[k] = float(v)

    inputs = {}
    for lineno, s in sections["inputs"]:
        if s.endswith("external"):
            inputs[s[: -len("external")].strip()] = None
        elif "=" in s:
            iname, sig = (p.strip() for p in s.split("=", 1))
            inputs[iname] = _parse_expr(sig, lineno)
        else:
            raise ModelError(f"bad input line '{s}'", lineno)

    delays = {}
    for lineno, s in sections["delays"]:
        if "=" not in s:
            raise ModelError(f"bad delay line '{s}'", lineno)
        dname, val = (p.strip() for p in s.split("=", 1))
        delays[dname] = _parse_param_value(val, pvals, lineno)
        if delays[dname] < 0:
            raise ModelError(f"delay '{dname}' must be nonnegative", lineno)

    domain = {}
    for lineno, s in sections["domain"]:
        m = _DOMAIN_RE.match(s)
        if not m:
            raise ModelError(f"bad domain line '{s}'", lineno)
        domain[m.group(1)] = (float(m.group(2)), float(m.group(3)))

    if kind == "network" or templates:
        if sections["dynamics"] or sections["states"]:
            raise ModelError("network files declare dynamics inside templates")
        spec = NetworkSpec(model_name, pvals, inputs, templates, nodes, couplings,
                           edges, domain=domain, actions=actions, source=text)
        return spec.validate()

    states = []
    for lineno, s in sections["states"]:
        states.extend(_parse_states_decl(s.split(), lineno))
    dyn = {}
    for lineno, s in sections["dynamics"]:
        m = _DYN_RE.match(s)
        if not m:
            raise ModelError(f"bad dynamics line '{s}'", lineno)
        if m.group(1) in dyn:
            raise ModelError(f"duplicate dynamics for '{m.group(1)}'", lineno)
        dyn[m.group(1)] = _parse_expr(m.group(2), lineno)
    missing = [s for s in states if s not in dyn]
    extra = [s for s in dyn if s not in states]
    if missing or extra:
        raise ModelError(f"dynamics/states mismatch: missing {missing}, extra {extra}")
    m = SystemModel(model_name, states, pvals, inputs, delays, domain,
                    [dyn[s] for s in states], actions=actions, source=text)
    return m.validate()


def load_model(path, params=None):
    """Load a ``.sysdl`` file; returns SystemModel or NetworkSpec."""
    import pathlib
    p = pathlib.Path(path)
    if not p.exists():
        raise ModelError(f"model file not found: {path}")
    name = p.stem
    return loads_model(p.read_text(), name=name, params=params)


# ---------------------------------------------------------------------------
# network flattening
# ---------------------------------------------------------------------------

def component_keys(spec):
    """Flat component keys, node order then template state order."""
    keys = []
    for node in spec.nodes:
        for s in spec.template_of(node).states:
            keys.append(f"{node}.{s}")
    return keys


def _qualify(e, node, local_states):
    return ex.rename(e, {s: f"{node}.{s}" for s in local_states})


def _instantiate_coupling(c, tail, head, spec):
    tail_states = spec.template_of(tail).states
    head_states = spec.template_of(head).states
    mapping = {f"tail.{s}": f"{tail}.{s}" for s in tail_states}
    mapping.update({f"head.{s}": f"{head}.{s}" for s in head_states})
    if len(tail_states) == 1:
        mapping["tail"] = f"{tail}.{tail_states[0]}"
    if len(head_states) == 1:
        mapping["head"] = f"{head}.{head_states[0]}"
    return ex.rename(c.expr, mapping)


def assemble_network(spec):
    """Flatten a network into a SystemModel: intrinsic dynamics plus the sum
    of coupling expressions over each node's input set."""
    spec.validate()
    states = component_keys(spec)
    dyn = {}
    for node in spec.nodes:
        tmpl = spec.template_of(node)
        for s in tmpl.states:
            dyn[f"{node}.{s}"] = _qualify(tmpl.dynamics[s], node, tmpl.states)
    for e in spec.edges:
        c = spec.couplings[e.label]
        tmpl = spec.template_of(e.head)
        target = c.target if c.target is not None else tmpl.states[0]
        key = f"{e.head}.{target}"
        dyn[key] = dyn[key] + _instantiate_coupling(c, e.tail, e.head, spec)

    domain = {}
    for node in spec.nodes:
        tmpl = spec.template_of(node)
        for s in tmpl.states:
            if s in spec.domain:
                domain[f"{node}.{s}"] = spec.domain[s]

    m = SystemModel(spec.name, states, dict(spec.params), dict(spec.inputs), {},
                    domain, [dyn[s] for s in states], actions=dict(spec.actions),
                    source=spec.source)
    return m.validate()


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------

def jacobian(m):
    """Symbolic Jacobian J[i][j] = d f_i / d x_j.  Raises NonSmoothError if a
    nonsmooth builtin sits in a state-dependent position."""
    J = []
    for i, e in enumerate(m.field):
        row = []
        for s in m.states:
            try:
                row.append(ex.differentiate(e, s))
            except NonSmoothError as exc:
                raise NonSmoothError(
                    f"d/dt {m.states[i]} is not smooth in {s}: {exc}")
        J.append(row)
    return J


# ---------------------------------------------------------------------------
# balanced partitions and quotients
# ---------------------------------------------------------------------------

def _signature(spec, node, color):
    counts = {}
    for e in spec.in_edges(node):
        k = (e.label, color[e.tail])
        counts[k] = counts.get(k, 0) + 1
    return (color[node], tuple(sorted(counts.items())))


def coarsest_balanced_partition(spec, seed=None):
    """Coarsest refinement of the seed coloring (default: template identity)
    in which same-cluster nodes have identical per-(label, source-cluster)
    input-edge counts.  Iterative refinement to a fixed point."""
    order = spec.node_ids()
    if seed is None:
        color = {n: spec.nodes[n] for n in order}
    else:
        seed.validate(spec)
        color = seed.cluster_of()
    while True:
        sigs = {n: _signature(spec, n, color) for n in order}
        relabel = {}
        new = {}
        for n in order:
            key = sigs[n]
            if key not in relabel:
                relabel[key] = len(relabel)
            new[n] = relabel[key]
        if len(set(new.values())) == len(set(color.values())):
            return Partition.from_assignment(new, order)
        color = new


def is_balanced(spec, p):
    color = p.cluster_of()
    for cl in p.clusters:
        sigs = {_signature(spec, n, color) for n in cl}
        if len(sigs) != 1:
            return False
    return True


def quotient_network(spec, p):
    """Reduced network with one representative node per cluster and
    same-cluster inputs merged by multiplicity."""
    p.validate(spec)
    if not is_balanced(spec, p):
        raise ModelError("partition is not balanced; quotient undefined")
    color = p.cluster_of()
    rep_name = {ci: "+".join(cl) for ci, cl in enumerate(p.clusters)}
    nodes = {rep_name[ci]: spec.nodes[cl[0]] for ci, cl in enumerate(p.clusters)}
    edges = []
    for ci, cl in enumerate(p.clusters):
        rep = cl[0]  # balanced: any member sees the same input signature
        for e in spec.in_edges(rep):
            edges.append(Edge(rep_name[color[e.tail]], rep_name[ci], e.label))
    return NetworkSpec(f"{spec.name}/quotient", dict(spec.params), dict(spec.inputs),
                       spec.templates, nodes, spec.couplings, edges,
                       domain=dict(spec.domain), actions={}, source=spec.source).validate()


def quotient_system(spec, p):
    return assemble_network(quotient_network(spec, p))


def lift_partition(p, fine):
    """Express partition ``p`` (on original nodes) on the quotient by
    ``fine``: clusters of ``p`` must be unions of clusters of ``fine``."""
    color = p.cluster_of()
    groups = {}
    order = []
    for cl in fine.clusters:
        cols = {color[n] for n in cl}
        if len(cols) != 1:
            raise ModelError("partitions are not nested")
        col = cols.pop()
        if col not in groups:
            groups[col] = []
            order.append(col)
        groups[col].append("+".join(cl))
    return Partition(tuple(tuple(groups[c]) for c in order))


# ---------------------------------------------------------------------------
# compiled evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamRamp:
    """C1 smoothstep schedule replacing a parameter with a function of t."""
    param: str
    t_start: float
    t_end: float
    start: float
    end: float


def _ramp_code(r):
    return (f"({r.start!r}+({r.end - r.start!r})"
            f"*_ramp(t,{r.t_start!r},{r.t_end!r}))")


def _symbol_mapper(m, input_coords=None, ramps=None, externals=None):
    """Build the Var/Delayed -> code-string mapping for codegen."""
    idx = {s: i for i, s in enumerate(m.states)}
    n = m.n
    input_coords = list(input_coords or [])
    ramp_by_param = {r.param: r for r in (ramps or [])}
    externals = externals or {}

    def sym(node):
        if isinstance(node, ex.Delayed):
            if node.name not in idx:
                raise ModelError(f"delayed reference to non-state '{node.name}'")
            tau = m.delays[node.delay]
            return f"_hist({idx[node.name]},t-{tau!r})"
        key = node.key
        if key in idx:
            return f"x[{idx[key]}]"
        if key in input_coords:
            return f"x[{n + input_coords.index(key)}]"
        if key in ramp_by_param:
            return _ramp_code(ramp_by_param[key])
        if key in m.params:
            return repr(float(m.params[key]))
        if key in m.inputs:
            sig = m.inputs[key]
            if sig is None:
                if key not in externals:
                    raise ModelError(f"external input '{key}' has no bound signal")
                return f"_ext_{key}(t)"
            return ex.to_python(_inline_params(sig, m, ramp_by_param), sym)
        raise ModelError(f"cannot compile reference '{key}' in model '{m.name}'")

    return sym


def _inline_params(e, m, ramp_by_param):
    subs = {k: v for k, v in m.params.items() if k not in ramp_by_param}
    return ex.substitute(e, subs)


def _compile(src, names):
    ns = dict(ex.CODEGEN_NAMESPACE)
    ns["np"] = np
    ns.update(names)
    code = compile(src, "<symcon-codegen>", "exec")
    exec(code, ns)
    return ns["_gen"]


def compile_field(m, input_coords=None, ramps=None, externals=None):
    """Compile the vector field to ``f(t, x[, hist]) -> ndarray``.

    ``input_coords`` lists input names appended to the state vector as extra
    coordinates (used when certifying uniformly over inputs).  ``externals``
    binds external input names to callables of t.
    """
    sym = _symbol_mapper(m, input_coords, ramps, externals)
    parts = [ex.to_python(e, sym) for e in m.field]
    body = ",".join(parts)
    src = f"def _gen(t, x, _hist=None):\n    return np.array([{body}])\n"
    names = {f"_ext_{k}": v for k, v in (externals or {}).items()}
    return _compile(src, names)


def compile_jacobian(m, input_coords=None, ramps=None, externals=None):
    """Compile the symbolic Jacobian to ``J(t, x) -> (n, n) ndarray``."""
    J = jacobian(m)
    sym = _symbol_mapper(m, input_coords, ramps, externals)
    rows = []
    for row in J:
        rows.append("[" + ",".join(ex.to_python(e, sym) for e in row) + "]")
    src = ("def _gen(t, x):\n    return np.array([" + ",".join(rows) +
           "], dtype=float)\n")
    names = {f"_ext_{k}": v for k, v in (externals or {}).items()}
    return _compile(src, names)


# ---------------------------------------------------------------------------
# flow invariance
# ---------------------------------------------------------------------------

def check_flow_invariance(m, subspace, sample_count=200, tol=1e-9, box=None,
                          times=(0.0,), seed=0):
    """Sample points on span(B) and measure how far the vector field leaves
    the subspace: residual = max ||V f(x, t)||_inf.  Pass iff <= tol."""
    B = np.asarray(subspace.basis, dtype=float)
    V = np.asarray(subspace.complement, dtype=float)
    f = compile_field(m)
    if B.shape[0] == 0:
        return {"max_residual": 0.0, "passed": True, "samples": 0}
    rng = np.random.default_rng(seed)
    lo, hi = (np.array(b) for b in zip(*m.box(box)))
    scale = np.max(np.abs(np.stack([lo, hi])))
    worst = 0.0
    witness = None
    for _ in range(sample_count):
        c = rng.uniform(-scale, scale, size=B.shape[0])
        x = c @ B
        x = np.clip(x, lo, hi)
        # re-project after clipping so the sample stays on the subspace
        x = (x @ B.T) @ B
        for t in times:
            r = float(np.max(np.abs(V @ f(t, x)))) if V.shape[0] else 0.0
            if r > worst:
                worst, witness = r, x.copy()
    return {"max_residual": worst, "passed": worst <= tol,
            "samples": sample_count, "witness": None if witness is None else witness.tolist()}
