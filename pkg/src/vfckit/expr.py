"""Expression language for maps, sections and forms.

Grammar (precedence low to high)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Variables are ``y1..yn`` (chart coordinates), ``w1..wk`` (perturbation
parameters) and ``t`` (the perturbation size, epsilon or 1/n).  Constants are
``pi`` and ``E``.  Functions are ``sin``, ``cos``, ``exp`` and ``step``, a C-infinity
transition that is 0 for x <= 0 and 1 for x >= 1.  Non-smooth operators such
as ``abs`` are rejected with TYPE_ERROR.

Parsed expressions are sympy objects; decimals become exact rationals so that
printing and re-parsing is lossless.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
import sympy as sp
from sympy.printing.str import StrPrinter

from .errors import VfckitError

FUNCTIONS = ("sin", "cos", "exp", "step")
CONSTANTS = {"pi": sp.pi, "E": sp.E}
NON_SMOOTH = {"abs", "sign", "floor", "ceil", "min", "max", "sqrt", "log", "heaviside"}

_VAR_RE = re.compile(r"^(y|w)([1-9][0-9]*)$")
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


@lru_cache(maxsize=None)
def Y(i: int) -> sp.Symbol:
    return sp.Symbol(f"y{i}", real=True)


@lru_cache(maxsize=None)
def W(i: int) -> sp.Symbol:
    return sp.Symbol(f"w{i}", real=True)


T = sp.Symbol("t", real=True)


def ysyms(n: int) -> tuple:
    return tuple(Y(i) for i in range(1, n + 1))


def wsyms(k: int) -> tuple:
    return tuple(W(i) for i in range(1, k + 1))


# -- the smooth step primitive -------------------------------------------------


def _flat(u):
    return sp.Piecewise((sp.exp(-1 / u), u > 0), (0, True))


def step_formula(x):
    """Closed form of ``step`` used for symbolic differentiation."""
    return _flat(x) / (_flat(x) + _flat(1 - x))


class step(sp.Function):
    """C-infinity transition from 0 (x <= 0) to 1 (x >= 1)."""

    is_real = True

    @classmethod
    def eval(cls, x):
        if x.is_Number:
            if x <= 0:
                return sp.Integer(0)
            if x >= 1:
                return sp.Integer(1)

    def fdiff(self, argindex=1):
        u = sp.Dummy("u", real=True)
        return sp.diff(step_formula(u), u).subs(u, self.args[0])


def np_step(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(1 - x > 0, np.exp(-1.0 / np.where(1 - x > 0, 1 - x, 1.0)), 0.0)
        return a / (a + b)


# -- parsing ---------------------------------------------------------------------


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(text: str, line: int, col0: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            bad = len(text[pos:]) - len(text[pos:].lstrip()) + pos
            raise VfckitError(
                "PARSE_ERROR",
                f"unexpected character {text[bad]!r} at line {line}, column {col0 + bad + 1}",
                witness={"line": line, "column": col0 + bad + 1},
            )
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), col0 + start + 1))
        pos = m.end()
    toks.append(_Tok("end", "", col0 + len(text) + 1))
    return toks


class _Parser:
    def __init__(self, text: str, allowed: Optional[set], line: int, col0: int):
        self.toks = _tokenize(text, line, col0)
        self.i = 0
        self.allowed = allowed
        self.line = line

    def error(self, code: str, msg: str, tok: _Tok):
        raise VfckitError(
            code,
            f"{msg} at line {self.line}, column {tok.col}",
            witness={"line": self.line, "column": tok.col},
        )

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self, text: Optional[str] = None) -> _Tok:
        tok = self.tok
        if text is not None and tok.text != text:
            self.error("PARSE_ERROR", f"expected {text!r}, found {tok.text or 'end of input'!r}", tok)
        self.i += 1
        return tok

    def parse(self):
        if self.tok.kind == "end":
            self.error("PARSE_ERROR", "empty expression", self.tok)
        out = self.expr()
        if self.tok.kind != "end":
            self.error("PARSE_ERROR", f"unexpected {self.tok.text!r}", self.tok)
        return out

    def expr(self):
        out = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self):
        out = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            rhs = self.unary()
            out = out * rhs if op == "*" else out / rhs
        return out

    def unary(self):
        if self.tok.text == "-":
            self.take()
            return -self.unary()
        if self.tok.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.take()
            return sp.Rational(tok.text)
        if tok.text == "(":
            self.take()
            out = self.expr()
            self.take(")")
            return out
        if tok.kind == "name":
            self.take()
            name = tok.text
            if self.tok.text == "(":
                if name.lower() in NON_SMOOTH:
                    self.error("TYPE_ERROR", f"non-smooth or unsupported operator {name!r}", tok)
                if name not in FUNCTIONS:
                    self.error("TYPE_ERROR", f"unknown function {name!r}", tok)
                self.take("(")
                arg = self.expr()
                self.take(")")
                return {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "step": step}[name](arg)
            if name in CONSTANTS:
                return CONSTANTS[name]
            if name.lower() in NON_SMOOTH or name in FUNCTIONS:
                self.error("TYPE_ERROR", f"function {name!r} used without argument", tok)
            if name == "t":
                sym = T
            else:
                m = _VAR_RE.match(name)
                if not m:
                    self.error("TYPE_ERROR", f"unknown variable {name!r}", tok)
                sym = Y(int(m.group(2))) if m.group(1) == "y" else W(int(m.group(2)))
            if self.allowed is not None and sym not in self.allowed:
                self.error("TYPE_ERROR", f"variable {name!r} not available here", tok)
            return sym
        self.error("PARSE_ERROR", f"unexpected {tok.text or 'end of input'!r}", tok)


def parse_expr(text: str, allowed: Optional[Iterable] = None, line: int = 1, col: int = 0) -> sp.Expr:
    """Parse ``text``; ``allowed`` restricts the free variables."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return sp.Rational(repr(text)) if isinstance(text, float) else sp.Integer(text)
    allowed_set = None if allowed is None else set(allowed)
    return _Parser(str(text), allowed_set, line, col).parse()


def coerce_expr(value) -> sp.Expr:
    """Text or sympy input with plain ``y<i>``/``w<i>`` symbols mapped to the package symbols."""
    if isinstance(value, (str, int, float)):
        return parse_expr(value)
    expr = sp.sympify(value)
    subs = {}
    for s in expr.free_symbols:
        m = _VAR_RE.match(s.name)
        if m:
            subs[s] = (Y if m.group(1) == "y" else W)(int(m.group(2)))
        elif s.name == "t":
            subs[s] = T
    return expr.xreplace(subs)


def parse_constant(text) -> float:
    """Parse a variable-free expression (``cos(2*pi/3)``) to a float."""
    return float(parse_expr(text, allowed=()))


# -- printing --------------------------------------------------------------------


class _Printer(StrPrinter):
    def _print_Pow(self, expr, rational=False):
        b, e = expr.as_base_exp()
        if e == -1:
            return "1/" + self.parenthesize(b, 50)
        bs = self._print(b)
        if not (b.is_Symbol or (b.is_Integer and b >= 0)):
            bs = f"({bs})"
        es = self._print(e)
        if not (e.is_Symbol or (e.is_Integer and e >= 0)):
            es = f"({es})"
        return f"{bs}^{es}"

    def _print_Exp1(self, expr):
        return "E"

    def _print_Float(self, expr):
        return repr(float(expr))


_PRINTER = _Printer({"order": "lex"})


def to_text(expr) -> str:
    return _PRINTER.doprint(sp.sympify(expr))


# -- numeric evaluation ---------------------------------------------------------

_MODULES = [{"step": np_step}, "numpy"]


@lru_cache(maxsize=4096)
def _compiled(exprs: tuple, args: tuple):
    fn = sp.lambdify(args, list(exprs), modules=_MODULES, cse=True)
    return fn


def evaluate(exprs: Sequence, args: Sequence, values: np.ndarray) -> np.ndarray:
    """Evaluate ``exprs`` at rows of ``values`` (N, len(args)) -> (N, len(exprs))."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[0]
    if len(exprs) == 0:
        return np.zeros((n, 0))
    fn = _compiled(tuple(exprs), tuple(args))
    with np.errstate(all="ignore"):
        cols = fn(*[values[:, j] for j in range(len(args))])
    out = np.empty((n, len(exprs)))
    for k, c in enumerate(cols):
        out[:, k] = np.broadcast_to(np.asarray(c, dtype=float), (n,))
    return out


@dataclass(frozen=True)
class MapExpr:
    """A vector of expressions in ``y1..y_ydim``, ``w1..w_wdim`` and ``t``."""

    exprs: tuple
    ydim: int
    wdim: int = 0

    @classmethod
    def parse(cls, texts: Sequence, ydim: int, wdim: int = 0, allow_t: bool = True, line: int = 1):
        allowed = set(ysyms(ydim)) | set(wsyms(wdim))
        if allow_t:
            allowed.add(T)
        return cls(tuple(parse_expr(s, allowed, line=line) for s in texts), ydim, wdim)

    @classmethod
    def identity(cls, n: int) -> "MapExpr":
        return cls(ysyms(n), n)

    @property
    def dim(self) -> int:
        return len(self.exprs)

    @property
    def args(self) -> tuple:
        return ysyms(self.ydim) + wsyms(self.wdim) + (T,)

    def texts(self) -> list[str]:
        return [to_text(e) for e in self.exprs]

    def uses_t(self) -> bool:
        return any(T in e.free_symbols for e in self.exprs)

    def __call__(self, y, w=None, t: float = 0.0) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n = y.shape[0]
        parts = [y.reshape(n, self.ydim)]
        if self.wdim:
            if w is None:
                w = np.zeros((n, self.wdim))
            w = np.asarray(w, dtype=float)
            parts.append(np.broadcast_to(np.atleast_2d(w), (n, self.wdim)))
        parts.append(np.full((n, 1), float(t)))
        return evaluate(self.exprs, self.args, np.hstack(parts))

    def at(self, y, w=None, t: float = 0.0) -> np.ndarray:
        return self(np.asarray(y, dtype=float)[None, :], None if w is None else np.asarray(w)[None, :], t)[0]

    def jacobian(self, wrt: str = "y") -> "MatrixExpr":
        syms = ysyms(self.ydim) if wrt == "y" else wsyms(self.wdim)
        rows = tuple(tuple(sp.diff(e, s) for s in syms) for e in self.exprs)
        return MatrixExpr(rows, self.ydim, self.wdim, ncols=len(syms))

    def subs(self, mapping: dict) -> "MapExpr":
        return MapExpr(tuple(sp.sympify(e).subs(mapping, simultaneous=True) for e in self.exprs), self.ydim, self.wdim)

    def compose(self, inner: "MapExpr") -> "MapExpr":
        """``self`` after ``inner``: y -> self(inner(y)); inner's w/t pass through."""
        if inner.dim != self.ydim:
            raise VfckitError("TYPE_ERROR", f"cannot compose: inner has {inner.dim} outputs, outer expects {self.ydim}")
        mapping = {Y(i + 1): inner.exprs[i] for i in range(self.ydim)}
        return MapExpr(
            tuple(sp.sympify(e).subs(mapping, simultaneous=True) for e in self.exprs),
            inner.ydim,
            max(inner.wdim, self.wdim),
        )

    def with_dims(self, ydim: int, wdim: int) -> "MapExpr":
        return MapExpr(self.exprs, ydim, wdim)

    def __add__(self, other: "MapExpr") -> "MapExpr":
        return MapExpr(tuple(a + b for a, b in zip(self.exprs, other.exprs)), max(self.ydim, other.ydim), max(self.wdim, other.wdim))

    def __sub__(self, other: "MapExpr") -> "MapExpr":
        return MapExpr(tuple(a - b for a, b in zip(self.exprs, other.exprs)), max(self.ydim, other.ydim), max(self.wdim, other.wdim))

    def scaled(self, c) -> "MapExpr":
        return MapExpr(tuple(sp.sympify(c) * e for e in self.exprs), self.ydim, self.wdim)

    def concat(self, other: "MapExpr") -> "MapExpr":
        return MapExpr(self.exprs + other.exprs, max(self.ydim, other.ydim), max(self.wdim, other.wdim))

    def equals(self, other: "MapExpr") -> bool:
        if self.dim != other.dim:
            return False
        return all(sp.simplify(a - b) == 0 for a, b in zip(self.exprs, other.exprs))


@dataclass(frozen=True)
class MatrixExpr:
    """Matrix whose entries are expressions; ``rows`` is a tuple of tuples."""

    rows: tuple
    ydim: int
    wdim: int = 0
    ncols: Optional[int] = None

    @classmethod
    def parse(cls, rows: Sequence[Sequence], ydim: int, wdim: int = 0, line: int = 1):
        allowed = set(ysyms(ydim)) | set(wsyms(wdim))
        parsed = tuple(tuple(parse_expr(v, allowed, line=line) for v in row) for row in rows)
        ncols = len(parsed[0]) if parsed else 0
        return cls(parsed, ydim, wdim, ncols)

    @classmethod
    def constant(cls, m, ydim: int) -> "MatrixExpr":
        m = np.atleast_2d(np.asarray(m, dtype=float)) if len(np.shape(m)) else np.zeros((0, 0))
        rows = tuple(tuple(sp.nsimplify(float(v), rational=True) for v in row) for row in m)
        return cls(rows, ydim, 0, m.shape[1] if m.ndim == 2 else 0)

    @property
    def shape(self) -> tuple:
        return (len(self.rows), self.ncols if self.ncols is not None else (len(self.rows[0]) if self.rows else 0))

    def flat(self) -> MapExpr:
        return MapExpr(tuple(e for row in self.rows for e in row), self.ydim, self.wdim)

    def __call__(self, y, w=None, t: float = 0.0) -> np.ndarray:
        m, k = self.shape
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if m * k == 0:
            return np.zeros((y.shape[0], m, k))
        return self.flat()(y, w, t).reshape(-1, m, k)

    def at(self, y, w=None, t: float = 0.0) -> np.ndarray:
        return self(np.asarray(y, dtype=float)[None, :], None if w is None else np.asarray(w)[None, :], t)[0]

    def texts(self) -> list:
        return [[to_text(e) for e in row] for row in self.rows]

    def sympy(self) -> sp.Matrix:
        m, k = self.shape
        return sp.Matrix(m, k, [e for row in self.rows for e in row])

    def compose(self, inner: MapExpr) -> "MatrixExpr":
        mapping = {Y(i + 1): inner.exprs[i] for i in range(self.ydim)}
        rows = tuple(tuple(sp.sympify(e).subs(mapping, simultaneous=True) for e in row) for row in self.rows)
        return MatrixExpr(rows, inner.ydim, max(self.wdim, inner.wdim), self.shape[1])

    def matmul(self, other: "MatrixExpr") -> "MatrixExpr":
        prod = self.sympy() * other.sympy()
        return MatrixExpr(tuple(tuple(prod.row(i)) for i in range(prod.rows)), max(self.ydim, other.ydim), max(self.wdim, other.wdim), prod.cols)

    def apply(self, vec: MapExpr) -> MapExpr:
        prod = self.sympy() * sp.Matrix(list(vec.exprs))
        return MapExpr(tuple(prod), max(self.ydim, vec.ydim), max(self.wdim, vec.wdim))

    def left_inverse(self) -> "MatrixExpr":
        a = self.sympy()
        inv = sp.simplify((a.T * a).inv() * a.T)
        return MatrixExpr(tuple(tuple(inv.row(i)) for i in range(inv.rows)), self.ydim, self.wdim, inv.cols)


def numeric_jacobian(fn, y: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` (R^n -> R^m, vectorized over rows) at one point.

    Raises NON_DIFFERENTIABLE when the h and h/2 estimates disagree.
    """
    y = np.asarray(y, dtype=float)
    n = y.size

    def central(step_):
        pts = np.vstack([y + step_ * e for e in np.eye(n)] + [y - step_ * e for e in np.eye(n)])
        vals = np.atleast_2d(fn(pts))
        return ((vals[:n] - vals[n:]) / (2 * step_)).T

    j1 = central(h)
    j2 = central(h / 2)
    scale = max(1.0, float(np.max(np.abs(j1))) if j1.size else 1.0)
    if not np.all(np.isfinite(j1)) or np.max(np.abs(j1 - j2), initial=0.0) > 1e-4 * scale:
        raise VfckitError("NON_DIFFERENTIABLE", "finite differences did not converge", witness=y)
    return j2
