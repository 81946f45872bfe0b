"""Arithmetic expression trees: parsing, evaluation, symbolic differentiation.

Every formula in a model file (vector fields, couplings, input signals,
nonlinear state/input maps) is parsed into an immutable tree of the node
types below.  Grammar (infix, standard precedence)::

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := number | name | name '(' args ')' | name '[' int ']'
            | name '@' name | '(' expr ')'

Names may be dotted (``tail.x``) for coupling expressions.  ``name@tau``
references the value of a state at time ``t - tau`` for a declared delay
``tau``.  The bare name ``t`` is the time symbol.

Exponentiation binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import EvalError, ExprSyntaxError, NonSmoothError, UnknownFunctionError

__all__ = [
    "Expr", "Num", "Var", "Time", "Delayed", "Unary", "Bin", "Call",
    "Environment", "parse_expression", "evaluate", "differentiate",
    "render", "free_names", "substitute", "BUILTIN_ARITY",
]

# builtin name -> arity
BUILTIN_ARITY = {
    "sin": 1, "cos": 1, "exp": 1, "ln": 1, "abs": 1, "arctan": 1,
    "sqrt": 1, "min": 2, "max": 2, "step": 1, "ramp": 2,
}

# builtins whose value depends on the current time, not on their arguments
TIME_BUILTINS = {"step", "ramp"}

NONSMOOTH = {"abs", "min", "max", "step"}


# ---------------------------------------------------------------------------
# node types
# ---------------------------------------------------------------------------

class Expr:
    """Base class; all subclasses are frozen dataclasses, safe to share."""

    __slots__ = ()

    def __add__(self, other):
        return _add(self, _coerce(other))

    def __radd__(self, other):
        return _add(_coerce(other), self)

    def __sub__(self, other):
        return _sub(self, _coerce(other))

    def __rsub__(self, other):
        return _sub(_coerce(other), self)

    def __mul__(self, other):
        return _mul(self, _coerce(other))

    def __rmul__(self, other):
        return _mul(_coerce(other), self)

    def __truediv__(self, other):
        return _div(self, _coerce(other))

    def __neg__(self):
        return _neg(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    """Named reference: state component, parameter or input.  ``index`` is
    set for ``name[i]`` component references."""
    name: str
    index: int | None = None

    @property
    def key(self):
        return self.name if self.index is None else f"{self.name}[{self.index}]"


@dataclass(frozen=True)
class Time(Expr):
    pass


@dataclass(frozen=True)
class Delayed(Expr):
    name: str
    delay: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    child: Expr


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple


def _coerce(v):
    if isinstance(v, Expr):
        return v
    return Num(float(v))


# ---------------------------------------------------------------------------
# folding constructors
# ---------------------------------------------------------------------------

ZERO = Num(0.0)
ONE = Num(1.0)


def _is(e, v):
    return isinstance(e, Num) and e.value == v


def _add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return Bin("-", a, b)


def _mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return Num(a.value / b.value)
    return Bin("/", a, b)


def _pow(a, b):
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return ONE
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value ** b.value)
    return Bin("^", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Unary) and a.op == "-":
        return a.child
    return Unary("-", a)


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_OPS = set("+-*/^()[],@")


@dataclass
class _Tok:
    kind: str   # num | name | op | end
    text: str
    line: int
    col: int
    value: float = 0.0


def _tokenize(text, line0=1):
    toks = []
    i, n = 0, len(text)
    line, bol = line0, -1
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            bol = i
            i += 1
            continue
        col = i - bol
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                v = float(text[i:j])
            except ValueError:
                raise ExprSyntaxError(f"bad number '{text[i:j]}'", line, col)
            toks.append(_Tok("num", text[i:j], line, col, v))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] in "_."):
                j += 1
            toks.append(_Tok("name", text[i:j], line, col))
            i = j
            continue
        if c in _OPS:
            toks.append(_Tok("op", c, line, col))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character '{c}'", line, col)
    toks.append(_Tok("end", "", line, (n - bol)))
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    @property
    def cur(self):
        return self.toks[self.pos]

    def eat(self, text=None):
        t = self.cur
        if text is not None and t.text != text:
            raise ExprSyntaxError(f"expected '{text}', found '{t.text or 'end of input'}'",
                                  t.line, t.col)
        self.pos += 1
        return t

    def parse(self):
        e = self.expr()
        t = self.cur
        if t.kind != "end":
            raise ExprSyntaxError(f"unexpected token '{t.text}'", t.line, t.col)
        return e

    def expr(self):
        e = self.term()
        while self.cur.text in ("+", "-"):
            op = self.eat().text
            rhs = self.term()
            e = Bin(op, e, rhs)
        return e

    def term(self):
        e = self.unary()
        while self.cur.text in ("*", "/"):
            op = self.eat().text
            rhs = self.unary()
            e = Bin(op, e, rhs)
        return e

    def unary(self):
        if self.cur.text == "-":
            self.eat()
            c = self.unary()
            return _neg(c) if isinstance(c, Num) else Unary("-", c)
        return self.power()

    def power(self):
        e = self.atom()
        if self.cur.text == "^":
            self.eat()
            return Bin("^", e, self.unary())
        return e

    def atom(self):
        t = self.cur
        if t.kind == "num":
            self.eat()
            return Num(t.value)
        if t.kind == "name":
            self.eat()
            name = t.text
            if self.cur.text == "(":
                if name not in BUILTIN_ARITY:
                    raise UnknownFunctionError(f"unknown function '{name}'", t.line, t.col)
                self.eat("(")
                args = [self.expr()]
                while self.cur.text == ",":
                    self.eat(",")
                    args.append(self.expr())
                self.eat(")")
                if len(args) != BUILTIN_ARITY[name]:
                    raise ExprSyntaxError(
                        f"'{name}' takes {BUILTIN_ARITY[name]} argument(s), got {len(args)}",
                        t.line, t.col)
                return Call(name, tuple(args))
            if self.cur.text == "[":
                self.eat("[")
                it = self.cur
                if it.kind != "num" or int(it.value) != it.value:
                    raise ExprSyntaxError("component index must be an integer", it.line, it.col)
                self.eat()
                self.eat("]")
                return Var(name, int(it.value))
            if self.cur.text == "@":
                self.eat("@")
                dt = self.cur
                if dt.kind != "name":
                    raise ExprSyntaxError("expected delay name after '@'", dt.line, dt.col)
                self.eat()
                return Delayed(name, dt.text)
            if name == "t":
                return Time()
            return Var(name)
        if t.text == "(":
            self.eat("(")
            e = self.expr()
            self.eat(")")
            return e
        raise ExprSyntaxError(f"unexpected token '{t.text or 'end of input'}'", t.line, t.col)


def parse_expression(text, line=1):
    """Parse expression text into a tree.  ``line`` offsets error reporting
    when the text comes from the middle of a model file."""
    return _Parser(_tokenize(text, line)).parse()


# ---------------------------------------------------------------------------
# environment and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Environment:
    """Name bindings for evaluation.  ``values`` maps state components,
    parameters and inputs to reals.  ``delay_lookup(name, delay_name)``
    resolves ``x@tau``; unset means delayed refs are an error."""
    values: dict = field(default_factory=dict)
    t: float = 0.0
    delay_lookup: object = None

    def lookup(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise EvalError(f"unbound name '{key}'")


def _smoothstep(u):
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    return u * u * (3.0 - 2.0 * u)


def _apply_call(fn, args, t):
    if fn == "step":
        return 1.0 if t >= args[0] else 0.0
    if fn == "ramp":
        t0, t1 = args
        return _smoothstep((t - t0) / (t1 - t0))
    if fn == "sin":
        return math.sin(args[0])
    if fn == "cos":
        return math.cos(args[0])
    if fn == "exp":
        return math.exp(args[0])
    if fn == "ln":
        if args[0] <= 0.0:
            raise EvalError(f"ln of non-positive value {args[0]}")
        return math.log(args[0])
    if fn == "abs":
        return abs(args[0])
    if fn == "arctan":
        return math.atan(args[0])
    if fn == "sqrt":
        if args[0] < 0.0:
            raise EvalError(f"sqrt of negative value {args[0]}")
        return math.sqrt(args[0])
    if fn == "min":
        return min(args)
    if fn == "max":
        return max(args)
    raise EvalError(f"unknown builtin '{fn}'")


def evaluate(e, env):
    """Recursively evaluate ``e`` in ``env``; IEEE double semantics.
    Division by zero is reported with the offending subexpression."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return env.lookup(e.key)
    if isinstance(e, Time):
        return env.t
    if isinstance(e, Delayed):
        if env.delay_lookup is None:
            raise EvalError(f"delayed reference '{e.name}@{e.delay}' outside a DDE context")
        return env.delay_lookup(e.name, e.delay)
    if isinstance(e, Unary):
        return -evaluate(e.child, env)
    if isinstance(e, Bin):
        a = evaluate(e.left, env)
        b = evaluate(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0.0:
                raise EvalError("division by zero", render(e))
            return a / b
        if e.op == "^":
            try:
                return a ** b
            except (ValueError, OverflowError, ZeroDivisionError) as exc:
                raise EvalError(f"power failed: {exc}", render(e))
    if isinstance(e, Call):
        args = [evaluate(a, env) for a in e.args]
        try:
            return _apply_call(e.fn, args, env.t)
        except EvalError:
            raise
        except (ValueError, OverflowError) as exc:
            raise EvalError(f"'{e.fn}' failed: {exc}", render(e))
    raise EvalError(f"cannot evaluate node {e!r}")


# ---------------------------------------------------------------------------
# structural helpers
# ---------------------------------------------------------------------------

def free_names(e, out=None):
    """Set of referenced name keys (``Var.key``), excluding the time symbol.
    Delayed refs contribute their state name."""
    if out is None:
        out = set()
    if isinstance(e, Var):
        out.add(e.key)
    elif isinstance(e, Delayed):
        out.add(e.name)
    elif isinstance(e, Unary):
        free_names(e.child, out)
    elif isinstance(e, Bin):
        free_names(e.left, out)
        free_names(e.right, out)
    elif isinstance(e, Call):
        for a in e.args:
            free_names(a, out)
    return out


def has_delayed(e):
    if isinstance(e, Delayed):
        return True
    if isinstance(e, Unary):
        return has_delayed(e.child)
    if isinstance(e, Bin):
        return has_delayed(e.left) or has_delayed(e.right)
    if isinstance(e, Call):
        return any(has_delayed(a) for a in e.args)
    return False


def substitute(e, mapping):
    """Replace ``Var`` nodes whose key appears in ``mapping`` (key -> Expr
    or float).  Folds constants along the way."""
    if isinstance(e, Var):
        if e.key in mapping:
            return _coerce(mapping[e.key])
        return e
    if isinstance(e, (Num, Time, Delayed)):
        return e
    if isinstance(e, Unary):
        return _neg(substitute(e.child, mapping))
    if isinstance(e, Bin):
        a = substitute(e.left, mapping)
        b = substitute(e.right, mapping)
        return {"+": _add, "-": _sub, "*": _mul, "/": _div, "^": _pow}[e.op](a, b)
    if isinstance(e, Call):
        return Call(e.fn, tuple(substitute(a, mapping) for a in e.args))
    raise TypeError(f"cannot substitute into {e!r}")


def rename(e, mapping):
    """Rename variable base names (``tail`` -> ``x3``); keeps indices."""
    if isinstance(e, Var) and e.name in mapping:
        return Var(mapping[e.name], e.index)
    if isinstance(e, Delayed) and e.name in mapping:
        return Delayed(mapping[e.name], e.delay)
    if isinstance(e, (Num, Time, Var, Delayed)):
        return e
    if isinstance(e, Unary):
        return Unary(e.op, rename(e.child, mapping))
    if isinstance(e, Bin):
        return Bin(e.op, rename(e.left, mapping), rename(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.fn, tuple(rename(a, mapping) for a in e.args))
    raise TypeError(f"cannot rename in {e!r}")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _depends_on(e, var):
    return var in free_names(e)


def differentiate(e, var):
    """Exact symbolic derivative d e / d var with trivial constant folding.

    ``var`` is a name key (e.g. ``"x"`` or ``"x[1]"``).  Differentiating a
    nonsmooth builtin (abs/min/max/step) through a var-dependent argument
    raises :class:`NonSmoothError`; the piecewise choice is the caller's.
    """
    if not _depends_on(e, var):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.key == var else ZERO
    if isinstance(e, Delayed):
        # x(t - tau) is independent of the present value of x
        return ZERO
    if isinstance(e, Unary):
        return _neg(differentiate(e.child, var))
    if isinstance(e, Bin):
        a, b = e.left, e.right
        da = differentiate(a, var)
        db = differentiate(b, var)
        if e.op == "+":
            return _add(da, db)
        if e.op == "-":
            return _sub(da, db)
        if e.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if e.op == "/":
            # d(a/b) = da/b - a*db/b^2
            return _sub(_div(da, b), _div(_mul(a, db), _mul(b, b)))
        if e.op == "^":
            if not _depends_on(b, var):
                # d(a^c) = c * a^(c-1) * da
                return _mul(_mul(b, _pow(a, _sub(b, ONE))), da)
            if not _depends_on(a, var):
                # d(c^b) = c^b * ln(c) * db
                return _mul(_mul(e, Call("ln", (a,))), db)
            # a^b = exp(b ln a)
            inner = _add(_mul(db, Call("ln", (a,))), _div(_mul(b, da), a))
            return _mul(e, inner)
    if isinstance(e, Call):
        if e.fn in NONSMOOTH:
            raise NonSmoothError(
                f"cannot differentiate nonsmooth '{e.fn}' with respect to '{var}'")
        if e.fn == "ramp":
            # arguments are var-dependent only in pathological inputs
            raise NonSmoothError(
                f"cannot differentiate 'ramp' arguments with respect to '{var}'")
        (a,) = e.args
        da = differentiate(a, var)
        if e.fn == "sin":
            return _mul(Call("cos", (a,)), da)
        if e.fn == "cos":
            return _neg(_mul(Call("sin", (a,)), da))
        if e.fn == "exp":
            return _mul(e, da)
        if e.fn == "ln":
            return _div(da, a)
        if e.fn == "arctan":
            return _div(da, _add(ONE, _mul(a, a)))
        if e.fn == "sqrt":
            return _div(da, _mul(Num(2.0), e))
    raise NonSmoothError(f"cannot differentiate node {e!r}")


# ---------------------------------------------------------------------------
# rendering and code generation
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def render(e):
    """Infix rendering; ``parse_expression(render(e))`` returns an equal tree."""
    return _render(e, 0)


def _render(e, parent_prec):
    if isinstance(e, Num):
        v = e.value
        if v == int(v) and abs(v) < 1e16:
            s = str(int(v))
        else:
            s = repr(v)
        if v < 0 and parent_prec > 0:
            return f"({s})"
        return s
    if isinstance(e, Var):
        return e.key
    if isinstance(e, Time):
        return "t"
    if isinstance(e, Delayed):
        return f"{e.name}@{e.delay}"
    if isinstance(e, Unary):
        s = "-" + _render(e.child, _PREC["neg"])
        return f"({s})" if parent_prec > _PREC["neg"] else s
    if isinstance(e, Bin):
        p = _PREC[e.op]
        # left operand at own precedence, right one tighter (left-assoc);
        # '^' is right-associative so mirror that
        if e.op == "^":
            s = f"{_render(e.left, p + 1)}^{_render(e.right, p)}"
        else:
            s = f"{_render(e.left, p)}{e.op}{_render(e.right, p + 1)}"
        return f"({s})" if parent_prec > p else s
    if isinstance(e, Call):
        args = ",".join(_render(a, 0) for a in e.args)
        return f"{e.fn}({args})"
    raise TypeError(f"cannot render {e!r}")


# runtime namespace for generated code
def _rt_step(t, t0):
    return 1.0 if t >= t0 else 0.0


def _rt_ramp(t, t0, t1):
    return _smoothstep((t - t0) / (t1 - t0))


CODEGEN_NAMESPACE = {
    "sin": math.sin, "cos": math.cos, "exp": math.exp, "ln": math.log,
    "arctan": math.atan, "sqrt": math.sqrt, "_abs": abs,
    "_min": min, "_max": max, "_step": _rt_step, "_ramp": _rt_ramp,
}

_FN_CODE = {"abs": "_abs", "min": "_min", "max": "_max"}


def to_python(e, sym):
    """Render ``e`` as a Python source fragment.  ``sym(node)`` maps Var and
    Delayed nodes to code strings; the time symbol is the local ``t``."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, (Var, Delayed)):
        return sym(e)
    if isinstance(e, Time):
        return "t"
    if isinstance(e, Unary):
        return f"(-{to_python(e.child, sym)})"
    if isinstance(e, Bin):
        op = "**" if e.op == "^" else e.op
        return f"({to_python(e.left, sym)}{op}{to_python(e.right, sym)})"
    if isinstance(e, Call):
        args = ",".join(to_python(a, sym) for a in e.args)
        if e.fn in TIME_BUILTINS:
            return f"_{e.fn}(t,{args})"
        return f"{_FN_CODE.get(e.fn, e.fn)}({args})"
    raise TypeError(f"cannot compile {e!r}")
