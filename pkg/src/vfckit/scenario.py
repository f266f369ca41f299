"""Scenario files: named blocks of ``key = value`` lines.

A block starts with ``[kind label]``.  Values are scalars (expressions,
numbers, booleans, words) or bracketed lists of values; a value whose
brackets are still open at the end of a line continues on the next line.
``#`` starts a comment.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import sympy as sp

from .bundle import BundleChart, BundleExtensionDatum
from .errors import VfckitError
from .expr import MapExpr, MatrixExpr, T, parse_constant, parse_expr, to_text, wsyms, ysyms
from .kuranishi import CoordinateChange, KuranishiChart, KuranishiStructure
from .orbifold import Ball, Box, DifferentialForm, FiniteGroupAction, OrbifoldChart
from .perturbation import Multisection
from .report import TOL

_DOMAIN_KEYS = {"domain.lower", "domain.upper", "domain.closed_lower", "domain.closed_upper", "domain.center", "domain.radius"}

KEYS = {
    "scenario": {"title", "doc", "vdim", "boundary", "exercises"},
    "chart": {"dim", "group", "base_point", "fiber_dim", "representation", "section", "global", "orientation"} | _DOMAIN_KEYS,
    "change": {"src", "dst", "phi", "hom", "fiber", "kind"} | _DOMAIN_KEYS,
    "extension": {"src", "dst", "pi", "fiber"} | _DOMAIN_KEYS,
    "map": {"chart", "dim", "expr"},
    "form": {"chart", "dim", "degree"},
    "correspondence": {"chart", "source", "target"},
    "presentation": {"charts"},
    "multisection": {"chart", "branches"},
    "settings": {"n", "epsilon", "seeds", "sweep", "levels", "above", "stokes_form", "pushout_form", "pushout_map", "grid", "compose", "kernel", "pou_alt"},
    "tolerances": set(TOL),
}
# keys whose values are plain words or free text rather than expressions
_WORD_KEYS = {"title", "doc", "exercises", "boundary", "src", "dst", "kind", "chart", "source", "target", "stokes_form", "pushout_form", "pushout_map"}
_COEFF_RE = re.compile(r"^coeff(\.[1-9]+)?$")


@dataclass(frozen=True)
class Leaf:
    text: str
    line: int
    col: int


@dataclass
class Entry:
    key: str
    value: object  # Leaf or nested list of values
    line: int
    col: int


@dataclass
class Block:
    kind: str
    label: str
    entries: dict
    line: int

    def get(self, key: str, default=None):
        e = self.entries.get(key)
        return default if e is None else e.value

    def has(self, key: str) -> bool:
        return key in self.entries


def _perr(msg: str, line: int, col: int):
    raise VfckitError("PARSE_ERROR", f"{msg} at line {line}, column {col}", witness={"line": line, "column": col})


class _ValueParser:
    """Bracketed lists over a text whose characters carry (line, col)."""

    def __init__(self, text: str, pos: list):
        self.text, self.pos, self.i = text, pos, 0

    def where(self, i: Optional[int] = None):
        i = self.i if i is None else i
        return self.pos[min(i, len(self.pos) - 1)] if self.pos else (0, 0)

    def skip(self):
        while self.i < len(self.text) and self.text[self.i].isspace():
            self.i += 1

    def value(self):
        self.skip()
        if self.i < len(self.text) and self.text[self.i] == "[":
            self.i += 1
            items = []
            self.skip()
            if self.i < len(self.text) and self.text[self.i] == "]":
                self.i += 1
                return items
            while True:
                items.append(self.value())
                self.skip()
                if self.i >= len(self.text):
                    _perr("unclosed '['", *self.where(len(self.text) - 1))
                c = self.text[self.i]
                self.i += 1
                if c == "]":
                    return items
                if c != ",":
                    _perr(f"expected ',' or ']', found {c!r}", *self.where(self.i - 1))
        start, depth = self.i, 0
        while self.i < len(self.text):
            c = self.text[self.i]
            if c == "(":
                depth += 1
            elif c == ")":
                depth -= 1
            elif depth == 0 and c in ",]":
                break
            elif c == "[":
                _perr("unexpected '['", *self.where())
            self.i += 1
        raw = self.text[start:self.i]
        lead = len(raw) - len(raw.lstrip())
        text = raw.strip()
        if not text:
            _perr("empty value", *self.where(start))
        line, col = self.where(start + lead)
        return Leaf(text, line, col)

    def parse(self):
        out = self.value()
        self.skip()
        if self.i < len(self.text):
            _perr(f"trailing text {self.text[self.i:]!r}", *self.where())
        return out


def _allowed_key(kind: str, key: str) -> bool:
    if kind == "form" and _COEFF_RE.match(key):
        return True
    return key in KEYS.get(kind, set())


def parse_text(text: str) -> list:
    """Parse scenario text into blocks (no semantic checks yet)."""
    lines = text.splitlines()
    blocks, cur = [], None
    i = 0
    while i < len(lines):
        raw = lines[i]
        ln = i + 1
        body = raw.split("#", 1)[0]
        i += 1
        if not body.strip():
            continue
        s = body.strip()
        if s.startswith("["):
            m = re.match(r"^\[\s*([A-Za-z_]+)(?:\s+([^\]\s]+))?\s*\]$", s)
            if not m:
                _perr("malformed block header", ln, body.index("[") + 1)
            kind, label = m.group(1), m.group(2) or ""
            if kind not in KEYS:
                _perr(f"unknown block kind {kind!r}", ln, body.index(kind) + 1)
            cur = Block(kind, label, {}, ln)
            blocks.append(cur)
            continue
        if "=" not in body:
            _perr("expected 'key = value'", ln, len(body) - len(body.lstrip()) + 1)
        if cur is None:
            _perr("entry outside of a block", ln, 1)
        key_part, val_part = body.split("=", 1)
        key = key_part.strip()
        kcol = len(key_part) - len(key_part.lstrip()) + 1
        if not _allowed_key(cur.kind, key):
            _perr(f"unknown key {key!r} in [{cur.kind}] block", ln, kcol)
        if key in cur.entries:
            _perr(f"duplicate key {key!r}", ln, kcol)
        vcol0 = len(key_part) + 1
        chars, pos = list(val_part), [(ln, vcol0 + j + 1) for j in range(len(val_part))]
        depth = val_part.count("[") - val_part.count("]")
        while depth > 0 and i < len(lines):
            nxt = lines[i].split("#", 1)[0]
            i += 1
            chars += ["\n"] + list(nxt)
            pos += [(i - 1, len(lines[i - 2]) + 1)] + [(i, j + 1) for j in range(len(nxt))]
            depth += nxt.count("[") - nxt.count("]")
        vtext = "".join(chars)
        if key in _WORD_KEYS:
            stripped = vtext.strip()
            lead = len(vtext) - len(vtext.lstrip())
            value = Leaf(stripped, *(pos[lead] if pos else (ln, vcol0)))
        else:
            value = _ValueParser(vtext, pos).parse()
        cur.entries[key] = Entry(key, value, ln, kcol)
    return blocks


# -- value conversion ------------------------------------------------------------


def _leaves(v) -> list:
    if isinstance(v, Leaf):
        return [v]
    out = []
    for x in v:
        out += _leaves(x)
    return out


def _expr(leaf: Leaf, allowed):
    return parse_expr(leaf.text, allowed, leaf.line, leaf.col - 1)


def _num(leaf: Leaf) -> float:
    return float(parse_expr(leaf.text, (), leaf.line, leaf.col - 1))


def _int(leaf: Leaf) -> int:
    v = _num(leaf)
    if v != int(v):
        raise VfckitError("TYPE_ERROR", f"expected an integer at line {leaf.line}, column {leaf.col}", witness={"line": leaf.line, "column": leaf.col})
    return int(v)


def _bool(leaf: Leaf) -> bool:
    if leaf.text.lower() in ("true", "1"):
        return True
    if leaf.text.lower() in ("false", "0"):
        return False
    raise VfckitError("TYPE_ERROR", f"expected true/false at line {leaf.line}, column {leaf.col}", witness={"line": leaf.line, "column": leaf.col})


def _list(v, what: str, entry: Optional[Entry] = None) -> list:
    if isinstance(v, Leaf):
        raise VfckitError("TYPE_ERROR", f"{what} must be a list (line {v.line})", witness={"line": v.line, "column": v.col})
    return v


def _matrix(v, n: int, m: int, what: str) -> np.ndarray:
    rows = _list(v, what)
    vals = [[_num(x) for x in _list(r, what)] for r in rows]
    if n == 0 or m == 0:
        return np.zeros((n, m))
    if len(vals) != n or any(len(r) != m for r in vals):
        raise VfckitError("MALFORMED_MATRIX", f"{what}: expected a {n}x{m} matrix")
    return np.array(vals, dtype=float)


def _domain(block: Block, n: int):
    if block.has("domain.center"):
        c = [_num(x) for x in _list(block.get("domain.center"), "domain.center")]
        return Ball(tuple(c), _num(block.get("domain.radius")))
    if not block.has("domain.lower"):
        return None
    lo = [_num(x) for x in _list(block.get("domain.lower"), "domain.lower")]
    hi = [_num(x) for x in _list(block.get("domain.upper"), "domain.upper")]
    cl = [_bool(x) for x in block.get("domain.closed_lower", [])] or [False] * len(lo)
    cu = [_bool(x) for x in block.get("domain.closed_upper", [])] or [False] * len(lo)
    if n and len(lo) != n:
        raise VfckitError("TYPE_ERROR", f"[{block.kind} {block.label}]: domain has dimension {len(lo)}, expected {n}")
    return Box(tuple(lo), tuple(hi), tuple(cl), tuple(cu))


def _exprs(v, n: int, wdim: int = 0, allow_t: bool = False) -> tuple:
    allowed = set(ysyms(n)) | set(wsyms(wdim)) | ({T} if allow_t else set())
    return tuple(_expr(x, allowed) for x in _list(v, "expression list"))


def _matexpr(v, n: int, rows: int, cols: int) -> MatrixExpr:
    allowed = set(ysyms(n))
    data = _list(v, "matrix")
    parsed = tuple(tuple(_expr(x, allowed) for x in _list(r, "matrix row")) for r in data)
    if rows and cols and (len(parsed) != rows or any(len(r) != cols for r in parsed)):
        raise VfckitError("MALFORMED_MATRIX", f"expected a {rows}x{cols} matrix of expressions")
    return MatrixExpr(parsed, n, 0, cols)


# -- scenario object graph -------------------------------------------------------


@dataclass
class FormSpec:
    chart: Optional[str]
    dim: int
    form: DifferentialForm


@dataclass
class MapSpec:
    chart: str
    expr: MapExpr


@dataclass
class CorrespondenceSpec:
    chart: str
    source: str
    target: str


@dataclass
class Scenario:
    name: str
    blocks: list
    info: dict = field(default_factory=dict)
    charts: dict = field(default_factory=dict)
    changes: list = field(default_factory=list)
    extensions: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)
    forms: dict = field(default_factory=dict)
    correspondences: dict = field(default_factory=dict)
    presentations: dict = field(default_factory=dict)
    multisections: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def structure(self, charts: Optional[list] = None) -> KuranishiStructure:
        labs = charts or sorted(self.charts)
        ch = {k: self.charts[k] for k in labs}
        changes = [c for c in self.changes if c.src in ch and c.dst in ch]
        ext = {k: v for k, v in self.extensions.items() if k[0] in ch and k[1] in ch}
        return KuranishiStructure(ch, changes, ext)

    @property
    def vdim(self) -> int:
        vd = {c.vdim for c in self.charts.values()}
        if len(vd) == 1:
            return vd.pop()
        # charts of a correspondence scenario differ; use the declared value
        return int(self.info["vdim"]) if "vdim" in self.info else -999

    @property
    def has_boundary(self) -> bool:
        return any(isinstance(c.domain, Box) and c.domain.faces() for c in self.charts.values())

    def setting(self, key: str, default=None):
        return self.settings.get(key, default)

    def canonical(self) -> list:
        return [(b.kind, b.label, {k: _canon(e.value, k) for k, e in sorted(b.entries.items())}) for b in self.blocks]

    def serialize(self) -> str:
        out = []
        for kind, label, entries in self.canonical():
            out.append(f"[{kind} {label}]" if label else f"[{kind}]")
            for k, v in entries.items():
                out.append(f"{k} = {_render(v)}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def _canon(v, key: str):
    if key == "charts":
        return [x.text for x in v]
    if key in ("compose", "kernel"):
        return [[item[0].text, item[1].text, _canon(item[2], "value")] for item in v]
    if isinstance(v, Leaf):
        if key in _WORD_KEYS:
            return v.text
        if v.text.lower() in ("true", "false"):
            return v.text.lower()
        return to_text(parse_expr(v.text, None, v.line, v.col - 1))
    return [_canon(x, key) for x in v]


def _render(v) -> str:
    if isinstance(v, list):
        return "[" + ", ".join(_render(x) for x in v) + "]"
    return str(v)


def _resolve(label: str, table: dict, what: str, leaf: Optional[Leaf] = None):
    if label not in table:
        wit = {"label": label}
        if leaf is not None:
            wit.update({"line": leaf.line, "column": leaf.col})
        raise VfckitError("UNRESOLVED_LABEL", f"unknown {what} {label!r}", witness=wit)
    return table[label]


def _build_chart(b: Block) -> KuranishiChart:
    n = _int(b.get("dim"))
    dom = _domain(b, n)
    if dom is None:
        raise VfckitError("TYPE_ERROR", f"chart {b.label} has no domain")
    mats = b.get("group")
    elems = [_matrix(m, n, n, "group element") for m in mats] if mats is not None else [np.eye(n)]
    group = FiniteGroupAction(elems, dim=n)
    bp = tuple(_num(x) for x in b.get("base_point")) if b.has("base_point") else None
    k = _int(b.get("fiber_dim")) if b.has("fiber_dim") else 0
    reps = b.get("representation")
    rep = [_matrix(m, k, k, "representation matrix") for m in reps] if reps is not None else [np.eye(k)] * group.order
    base = OrbifoldChart(b.label, dom, group, bp)
    bundle = BundleChart(base, k, rep)
    sec = _exprs(b.get("section", []), n)
    if len(sec) != k:
        e = b.entries.get("section")
        raise VfckitError("TYPE_ERROR", f"chart {b.label}: section has {len(sec)} components, fiber dimension is {k}", witness={"line": e.line if e else b.line})
    gc = MapExpr(_exprs(b.get("global"), n), n) if b.has("global") else None
    orient = _int(b.get("orientation")) if b.has("orientation") else 1
    return KuranishiChart(b.label, bundle, MapExpr(sec, n), gc, orient)


def build(name: str, blocks: list) -> Scenario:
    sc = Scenario(name, blocks)
    seen = set()
    for b in blocks:
        if b.kind != "settings" and b.kind != "tolerances" and b.kind != "scenario":
            key = (b.kind, b.label)
            if key in seen:
                raise VfckitError("PARSE_ERROR", f"duplicate block [{b.kind} {b.label}] at line {b.line}", witness={"line": b.line, "column": 1})
            seen.add(key)
    for b in blocks:
        if b.kind == "scenario":
            sc.info = {k: (e.value.text if isinstance(e.value, Leaf) else e.value) for k, e in b.entries.items()}
            if b.label:
                sc.info.setdefault("label", b.label)
        elif b.kind == "chart":
            sc.charts[b.label] = _build_chart(b)
    for b in blocks:
        if b.kind == "change":
            src = _resolve(b.get("src").text, sc.charts, "chart", b.get("src"))
            dst = _resolve(b.get("dst").text, sc.charts, "chart", b.get("dst"))
            phi = MapExpr(_exprs(b.get("phi"), src.dim), src.dim)
            if phi.dim != dst.dim:
                raise VfckitError("TYPE_ERROR", f"change {b.label}: phi has {phi.dim} components, target dimension is {dst.dim}")
            hom = tuple(_int(x) for x in b.get("hom", [])) or tuple(range(src.group.order))
            fiber = _matexpr(b.get("fiber"), src.dim, dst.rank, src.rank) if b.has("fiber") else MatrixExpr.constant(np.zeros((dst.rank, src.rank)), src.dim)
            kind = b.get("kind").text if b.has("kind") else "strong"
            sc.changes.append(CoordinateChange(b.label, src.label, dst.label, phi, hom, fiber, _domain(b, src.dim), kind))
        elif b.kind == "extension":
            src = _resolve(b.get("src").text, sc.charts, "chart", b.get("src"))
            dst = _resolve(b.get("dst").text, sc.charts, "chart", b.get("dst"))
            pi = MapExpr(_exprs(b.get("pi"), dst.dim), dst.dim)
            fiber = _matexpr(b.get("fiber"), dst.dim, dst.rank, src.rank)
            sc.extensions[(src.label, dst.label)] = BundleExtensionDatum(src.label, dst.label, pi, fiber, _domain(b, dst.dim))
        elif b.kind == "map":
            if b.has("chart"):
                ch = _resolve(b.get("chart").text, sc.charts, "chart", b.get("chart"))
                n = ch.dim
                label = ch.label
            else:
                n, label = _int(b.get("dim")), ""
            sc.maps[b.label] = MapSpec(label, MapExpr(_exprs(b.get("expr"), n), n))
        elif b.kind == "form":
            if b.has("chart"):
                ch = _resolve(b.get("chart").text, sc.charts, "chart", b.get("chart"))
                n, label = ch.dim, ch.label
            else:
                n, label = _int(b.get("dim")), None
            deg = _int(b.get("degree")) if b.has("degree") else 0
            coeffs = {}
            for k, e in b.entries.items():
                if not k.startswith("coeff"):
                    continue
                idx = tuple(int(c) - 1 for c in k[6:]) if "." in k else ()
                coeffs[idx] = _expr(e.value, set(ysyms(n)))
            sc.forms[b.label] = FormSpec(label, n, DifferentialForm.make(n, deg, coeffs))
        elif b.kind == "correspondence":
            ch = _resolve(b.get("chart").text, sc.charts, "chart", b.get("chart"))
            sc.correspondences[b.label] = CorrespondenceSpec(ch.label, b.get("source").text, b.get("target").text)
        elif b.kind == "presentation":
            labs = [x.text for x in _list(b.get("charts"), "charts")]
            for x in _list(b.get("charts"), "charts"):
                _resolve(x.text, sc.charts, "chart", x)
            sc.presentations[b.label] = labs
        elif b.kind == "multisection":
            ch = _resolve(b.get("chart").text, sc.charts, "chart", b.get("chart"))
            branches = tuple(MapExpr(_exprs(br, ch.dim, allow_t=True), ch.dim) for br in _list(b.get("branches"), "branches"))
            sc.multisections[b.label] = (ch.label, Multisection(ch.label, branches))
        elif b.kind == "settings":
            for k, e in b.entries.items():
                sc.settings[k] = _setting(k, e.value)
        elif b.kind == "tolerances":
            for k, e in b.entries.items():
                sc.tolerances[k] = _num(e.value)
    for lab, spec in sc.correspondences.items():
        _resolve(spec.source, sc.maps, "map")
        _resolve(spec.target, sc.maps, "map")
    for key in ("stokes_form", "pushout_form"):
        if key in sc.settings:
            _resolve(sc.settings[key], sc.forms, "form")
    if "pushout_map" in sc.settings:
        _resolve(sc.settings["pushout_map"], sc.maps, "map")
    for pair in sc.settings.get("compose", []) + sc.settings.get("kernel", []):
        for lab in pair[:2]:
            _resolve(lab, sc.forms, "form")
    return sc


def _setting(key: str, v):
    if key in _WORD_KEYS:
        return v.text
    if key == "sweep":
        return _expr(v, None)
    if key in ("compose", "kernel"):
        return [[x.text for x in _list(item, key)[:2]] + [_num(_list(item, key)[2])] for item in _list(v, key)]
    if isinstance(v, Leaf):
        return _num(v)
    return [_num(x) for x in _leaves(v)]


def loads(text: str, name: str = "scenario") -> Scenario:
    return build(name, parse_text(text))


def load_scenario(ref: str) -> Scenario:
    """Load ``gallery:NAME`` or a scenario file path."""
    if ref.startswith("gallery:"):
        from .gallery import gallery_text

        name = ref.split(":", 1)[1]
        return loads(gallery_text(name), name)
    path = Path(ref)
    if not path.exists():
        raise VfckitError("UNRESOLVED_LABEL", f"scenario file {ref!r} not found", witness={"path": ref})
    return loads(path.read_text(encoding="utf-8"), path.stem)
