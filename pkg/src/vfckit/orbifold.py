"""Effective orbifolds presented by finite atlases of finite-group quotients.

A chart is a box-with-corners (or an open disk) in R^n with a finite matrix
group acting on it.  Charts are glued by transitions given as expressions
together with a group monomorphism.  Each chart also carries an injective
map into some R^N; the metric on the glued space is the minimum over group
orbits of the Euclidean distance between these coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp

from .errors import VfckitError
from .expr import MapExpr, T, Y, evaluate, np_step, numeric_jacobian, step, ysyms
from .numerics import gauss_legendre, gl_box, gl_interval, grid_points
from .report import FAIL, PASS, TOL, UNKNOWN, Check, Report

_EDGE = 1e-12


# -- domains ---------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Product of intervals; ``closed_lower[i]`` marks a boundary face at lower[i].

    Faces that are not closed are open ends of the chart (the domain does not
    contain them).  Closed faces are the corner structure of the chart.
    """

    lower: tuple
    upper: tuple
    closed_lower: tuple = ()
    closed_upper: tuple = ()

    def __post_init__(self):
        n = len(self.lower)
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "closed_lower", tuple(bool(v) for v in (self.closed_lower or (False,) * n)))
        object.__setattr__(self, "closed_upper", tuple(bool(v) for v in (self.closed_upper or (False,) * n)))
        if len(self.upper) != n or len(self.closed_lower) != n or len(self.closed_upper) != n:
            raise VfckitError("TYPE_ERROR", "box bounds and masks must have equal length")
        if any(a >= b for a, b in zip(self.lower, self.upper)):
            raise VfckitError("TYPE_ERROR", "box lower bounds must be below upper bounds")

    kind = "box"

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def has_boundary(self) -> bool:
        return any(self.closed_lower) or any(self.closed_upper)

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        """Membership; open sides are shrunk by ``margin``, closed faces are kept."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ok = np.ones(len(pts), dtype=bool)
        for i in range(self.dim):
            x = pts[:, i]
            if self.closed_lower[i]:
                ok &= x >= self.lower[i] - _EDGE
            else:
                ok &= x > self.lower[i] + margin
            if self.closed_upper[i]:
                ok &= x <= self.upper[i] + _EDGE
            else:
                ok &= x < self.upper[i] - margin
        return ok

    def distance_outside(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        below = np.maximum(self.lo - pts, 0.0)
        above = np.maximum(pts - self.hi, 0.0)
        return np.linalg.norm(below + above, axis=1)

    def shrink(self, margin: float) -> "Box":
        lo = [a if c else a + margin for a, c in zip(self.lower, self.closed_lower)]
        hi = [b if c else b - margin for b, c in zip(self.upper, self.closed_upper)]
        return Box(tuple(lo), tuple(hi), self.closed_lower, self.closed_upper)

    def samples(self, per_dim: int = 10) -> np.ndarray:
        return grid_points(self.lower, self.upper, per_dim)

    def quadrature(self, q: int) -> tuple:
        return gl_box(self.lower, self.upper, q)

    def faces(self) -> list:
        out = []
        for i in range(self.dim):
            if self.closed_lower[i]:
                out.append((i, "lower", self.lower[i]))
            if self.closed_upper[i]:
                out.append((i, "upper", self.upper[i]))
        return out

    def face_samples(self, face, per_dim: int = 10) -> np.ndarray:
        i, _, value = face
        lo = [a for j, a in enumerate(self.lower) if j != i]
        hi = [b for j, b in enumerate(self.upper) if j != i]
        rest = grid_points(lo, hi, per_dim)
        return np.insert(rest, i, value, axis=1)

    def face_domain(self, face) -> "Box":
        i = face[0]
        keep = [j for j in range(self.dim) if j != i]
        return Box(
            tuple(self.lower[j] for j in keep),
            tuple(self.upper[j] for j in keep),
            tuple(self.closed_lower[j] for j in keep),
            tuple(self.closed_upper[j] for j in keep),
        )

    def on_face(self, pts, face, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.abs(pts[:, face[0]] - face[2]) < tol

    def bump(self, margin: float) -> sp.Expr:
        """Smooth function equal to 1 on ``shrink(margin)`` and 0 off the open box.

        Closed faces impose no cut-off so supports may touch the boundary.
        """
        out = sp.Integer(1)
        m = sp.nsimplify(margin, rational=True)
        for i in range(self.dim):
            y = Y(i + 1)
            if not self.closed_lower[i]:
                out *= step((y - sp.nsimplify(self.lower[i], rational=True)) / m)
            if not self.closed_upper[i]:
                out *= step((sp.nsimplify(self.upper[i], rational=True) - y) / m)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "box",
            "lower": list(self.lower),
            "upper": list(self.upper),
            "closed_lower": [int(v) for v in self.closed_lower],
            "closed_upper": [int(v) for v in self.closed_upper],
        }


@dataclass(frozen=True)
class Ball:
    """Open Euclidean ball (used for rotation-invariant disk charts)."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if self.radius <= 0:
            raise VfckitError("TYPE_ERROR", "ball radius must be positive")

    kind = "ball"
    has_boundary = False

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.center) - self.radius

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.center) + self.radius

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.linalg.norm(pts - np.array(self.center), axis=1) < self.radius - margin

    def distance_outside(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.maximum(np.linalg.norm(pts - np.array(self.center), axis=1) - self.radius, 0.0)

    def shrink(self, margin: float) -> "Ball":
        return Ball(self.center, self.radius - margin)

    def samples(self, per_dim: int = 10) -> np.ndarray:
        pts = grid_points(self.lo, self.hi, per_dim)
        return pts[self.contains(pts)]

    def quadrature(self, q: int) -> tuple:
        """Polar rule: Gauss-Legendre in r, periodic trapezoid in the angle."""
        c = np.array(self.center)
        if self.dim == 1:
            return gl_box([c[0] - self.radius], [c[0] + self.radius], q)
        if self.dim != 2:
            raise VfckitError("MODE_UNSUPPORTED", "ball quadrature is implemented in dimensions 1 and 2")
        r, wr = gl_interval(0.0, self.radius, q)
        m = 2 * q
        th = 2 * np.pi * np.arange(m) / m
        R, TH = np.meshgrid(r, th, indexing="ij")
        pts = np.stack([c[0] + R * np.cos(TH), c[1] + R * np.sin(TH)], axis=-1).reshape(-1, 2)
        wts = (np.outer(wr * r, np.full(m, 2 * np.pi / m))).reshape(-1)
        return pts, wts

    def faces(self) -> list:
        return []

    def bump(self, margin: float) -> sp.Expr:
        r2 = sum((Y(i + 1) - sp.nsimplify(c, rational=True)) ** 2 for i, c in enumerate(self.center))
        R = sp.nsimplify(self.radius, rational=True)
        m = sp.nsimplify(margin, rational=True)
        return step((R ** 2 - r2) / (R ** 2 - (R - m) ** 2))

    def to_dict(self) -> dict:
        return {"kind": "ball", "center": list(self.center), "radius": self.radius}


Domain = Box | Ball


# -- groups ----------------------------------------------------------------------


class FiniteGroupAction:
    """A finite group given by its matrices acting linearly on R^n."""

    def __init__(self, elements: Sequence, generator_labels: Optional[Sequence] = None, dim: Optional[int] = None):
        if len(elements) == 0:
            raise VfckitError("EMPTY_GROUP", "a group needs at least one element")
        mats = []
        for k, m in enumerate(elements):
            a = np.asarray(m, dtype=float)
            if a.ndim == 0 and dim in (None, 1):
                a = a.reshape(1, 1)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise VfckitError("MALFORMED_MATRIX", f"element {k} is not square", witness=k)
            if dim is not None and a.shape[0] != dim:
                raise VfckitError("MALFORMED_MATRIX", f"element {k} has size {a.shape[0]}, expected {dim}", witness=k)
            mats.append(a)
        if len({m.shape for m in mats}) != 1:
            raise VfckitError("MALFORMED_MATRIX", "elements have different sizes")
        self.elements = mats
        self.generator_labels = list(generator_labels) if generator_labels else None

    @classmethod
    def trivial(cls, n: int) -> "FiniteGroupAction":
        return cls([np.eye(n)], dim=n)

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def dim(self) -> int:
        return self.elements[0].shape[0]

    def __len__(self) -> int:
        return len(self.elements)

    def index_of(self, m: np.ndarray, tol: float = TOL["grp"]) -> int:
        for k, e in enumerate(self.elements):
            if np.max(np.abs(e - m), initial=0.0) < tol:
                return k
        return -1

    @cached_property
    def identity(self) -> int:
        return self.index_of(np.eye(self.dim))

    @cached_property
    def table(self) -> np.ndarray:
        n = self.order
        out = np.full((n, n), -1, dtype=int)
        for i, j in itertools.product(range(n), range(n)):
            out[i, j] = self.index_of(self.elements[i] @ self.elements[j])
        return out

    @cached_property
    def inverse(self) -> list:
        return [self.index_of(np.linalg.inv(e)) if abs(np.linalg.det(e)) > 1e-12 else -1 for e in self.elements]

    def axiom_residuals(self) -> dict:
        """Worst distance of products, identity and inverses from the element set."""

        def dist(m):
            return min(np.max(np.abs(e - m), initial=0.0) for e in self.elements)

        closure = max(dist(a @ b) for a in self.elements for b in self.elements)
        ident = dist(np.eye(self.dim))
        inv = 0.0
        for e in self.elements:
            if abs(np.linalg.det(e)) < 1e-12:
                inv = np.inf
                break
            inv = max(inv, dist(np.linalg.inv(e)))
        return {"closure": float(closure), "identity": float(ident), "inverse": float(inv)}

    def act(self, k: int, pts: np.ndarray) -> np.ndarray:
        return np.atleast_2d(pts) @ self.elements[k].T

    def orbit(self, pt: np.ndarray) -> np.ndarray:
        return np.stack([e @ pt for e in self.elements])

    def subgroup(self, indices: Sequence[int]) -> "FiniteGroupAction":
        return FiniteGroupAction([self.elements[i] for i in indices])

    def to_list(self) -> list:
        return [e.tolist() for e in self.elements]


def is_homomorphism(src: FiniteGroupAction, dst: FiniteGroupAction, hom: Sequence[int]) -> bool:
    if len(hom) != src.order or any(h < 0 or h >= dst.order for h in hom):
        return False
    ts, td = src.table, dst.table
    for i, j in itertools.product(range(src.order), range(src.order)):
        if ts[i, j] < 0 or hom[ts[i, j]] != td[hom[i], hom[j]]:
            return False
    return len(set(hom)) == len(hom)


# -- charts ----------------------------------------------------------------------


@dataclass
class OrbifoldChart:
    label: str
    domain: Domain
    group: FiniteGroupAction
    base_point: Optional[tuple] = None

    def __post_init__(self):
        if self.base_point is None:
            if isinstance(self.domain, Ball):
                self.base_point = tuple(self.domain.center)
            else:
                self.base_point = tuple(0.5 * (self.domain.lo + self.domain.hi))
        self.base_point = tuple(float(v) for v in self.base_point)

    @property
    def dim(self) -> int:
        return self.domain.dim


def _effectivity_candidates(chart: OrbifoldChart, per_dim: int) -> np.ndarray:
    base = np.array(chart.base_point)
    near = [base + e for e in np.eye(chart.dim)] + [base + 0.5 * e for e in np.eye(chart.dim)]
    pts = np.vstack([np.atleast_2d(near)] + [chart.domain.samples(per_dim)])
    return pts[chart.domain.contains(pts)]


def verify_chart(chart: OrbifoldChart, per_dim: int = 10, tol_grp: float = TOL["grp"]) -> Report:
    """Group axioms, effectivity, base-point fixing and domain invariance."""
    g = chart.group
    rep = Report("verify_chart")
    if g.dim != chart.dim:
        raise VfckitError("MALFORMED_MATRIX", f"group acts on R^{g.dim}, chart has dimension {chart.dim}")
    res = g.axiom_residuals()
    for name, value in res.items():
        rep.add(Check.from_residual(f"group_{name}", value, tol_grp))

    base = np.array(chart.base_point)
    in_dom = bool(chart.domain.contains(base)[0])
    moved = max(float(np.max(np.abs(e @ base - base))) for e in g.elements)
    rep.add(Check("base_point_in_domain", PASS if in_dom else FAIL, witness=None if in_dom else base))
    rep.add(Check.from_residual("base_point_fixed", moved, tol_grp, witness=base))

    cands = _effectivity_candidates(chart, per_dim)
    status, witness, worst = PASS, None, np.inf
    ident = g.index_of(np.eye(g.dim))
    for k, e in enumerate(g.elements):
        if k == ident and sum(1 for m in g.elements if np.max(np.abs(m - np.eye(g.dim))) < tol_grp) == 1:
            continue
        disp = np.linalg.norm(cands @ e.T - cands, axis=1)
        best = int(np.argmax(disp)) if len(disp) else -1
        top = float(disp[best]) if len(disp) else 0.0
        worst = min(worst, top)
        first = np.flatnonzero(disp > 1e-6)
        if top < tol_grp:
            status, witness = FAIL, {"element": k, "point": cands[best] if len(cands) else base}
            break
        if len(first) == 0:
            status, witness = UNKNOWN, {"element": k, "max_displacement": top}
    effective_witnesses = {}
    if status == PASS:
        for k, e in enumerate(g.elements):
            if k == ident:
                continue
            disp = np.linalg.norm(cands @ e.T - cands, axis=1)
            effective_witnesses[k] = cands[int(np.flatnonzero(disp > 1e-6)[0])]
    rep.add(Check("effectivity", status, None if worst == np.inf else worst, witness))
    rep.results["effectivity_witnesses"] = effective_witnesses

    samples = chart.domain.samples(per_dim)
    worst_out = 0.0
    wit = None
    for k, e in enumerate(g.elements):
        img = samples @ e.T
        out = chart.domain.distance_outside(img)
        inside = chart.domain.contains(img)
        bad = np.flatnonzero(~inside & (out > _EDGE))
        if len(bad):
            worst_out = max(worst_out, float(out[bad].max()))
            wit = wit or {"element": k, "point": samples[bad[0]]}
    rep.add(Check("domain_invariance", PASS if wit is None else FAIL, worst_out, wit))

    if isinstance(chart.domain, Box):
        faces = chart.domain.faces()
        perm_bad = None
        corner_status, corner_wit = PASS, None
        for face in faces:
            fs = chart.domain.face_samples(face, per_dim)
            for k, e in enumerate(g.elements):
                img = fs @ e.T
                hits = [f for f in faces if np.all(chart.domain.on_face(img, f))]
                if not hits:
                    perm_bad = perm_bad or {"element": k, "face": list(face[:2])}
                elif k != ident and face in hits:
                    if np.max(np.linalg.norm(img - fs, axis=1), initial=0.0) < tol_grp:
                        corner_status = FAIL
                        corner_wit = {"element": k, "face": list(face[:2])}
        rep.add(Check("faces_permuted", PASS if perm_bad is None else FAIL, witness=perm_bad))
        rep.add(Check("corner_effectivity", corner_status, witness=corner_wit))
    return rep


def stabilizer(chart: OrbifoldChart, point, tol_grp: float = TOL["grp"]) -> tuple:
    """Subgroup fixing ``point``: returns (FiniteGroupAction, element indices)."""
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.size != chart.dim or not chart.domain.contains(p)[0]:
        raise VfckitError("POINT_OUTSIDE_DOMAIN", f"{p.tolist()} is not in chart {chart.label}", witness=p)
    idx = [k for k, e in enumerate(chart.group.elements) if np.max(np.abs(e @ p - p)) < max(tol_grp, 1e-9 * (1 + np.abs(p).max()))]
    sub = chart.group.subgroup(idx)
    res = sub.axiom_residuals()
    if max(res.values()) > tol_grp:
        raise VfckitError("NOT_A_SUBGROUP", "stabilizer failed closure certification", witness=res)
    return sub, idx


# -- atlases ---------------------------------------------------------------------


@dataclass
class Transition:
    """Local representative (h, phi) of an embedding from chart src into chart dst."""

    src: str
    dst: str
    hom: tuple
    phi: MapExpr
    domain: Optional[Domain] = None

    def applies(self, pts, margin: float = 0.0) -> np.ndarray:
        if self.domain is None:
            return np.ones(len(np.atleast_2d(pts)), dtype=bool)
        return self.domain.contains(pts, margin)


@dataclass
class OrbifoldAtlas:
    charts: dict
    transitions: list = field(default_factory=list)
    global_coordinates: dict = field(default_factory=dict)

    def chart(self, label: str) -> OrbifoldChart:
        try:
            return self.charts[label]
        except KeyError:
            raise VfckitError("UNRESOLVED_LABEL", f"no chart {label!r}") from None

    def find(self, src: str, dst: str) -> list:
        return [t for t in self.transitions if t.src == src and t.dst == dst]

    def gcoord(self, label: str, pts) -> np.ndarray:
        g = self.global_coordinates.get(label)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if g is None:
            return pts
        return g(pts)

    def quotient_distance(self, la: str, ya, lb: str, yb) -> float:
        """Distance in the glued space, minimized over both group orbits."""
        ga = self.gcoord(la, self.chart(la).group.orbit(np.asarray(ya, dtype=float)))
        gb = self.gcoord(lb, self.chart(lb).group.orbit(np.asarray(yb, dtype=float)))
        return float(np.min(np.linalg.norm(ga[:, None, :] - gb[None, :, :], axis=2)))

    def verify_transition(self, tr: Transition, per_dim: int = 10, tol_eq: float = TOL["eq"]) -> Report:
        rep = Report("verify_transition")
        src, dst = self.chart(tr.src), self.chart(tr.dst)
        rep.add(Check("hom_monomorphism", PASS if is_homomorphism(src.group, dst.group, tr.hom) else FAIL))
        dom = tr.domain or src.domain
        pts = dom.samples(per_dim)
        pts = pts[src.domain.contains(pts)]
        worst, wit = 0.0, None
        base = tr.phi(pts)
        for k, e in enumerate(src.group.elements):
            lhs = tr.phi(pts @ e.T)
            rhs = base @ dst.group.elements[tr.hom[k]].T
            err = np.linalg.norm(lhs - rhs, axis=1)
            if len(err) and err.max() > worst:
                worst = float(err.max())
                wit = {"point": pts[int(err.argmax())], "element": k}
        rep.add(Check.from_residual("equivariance", worst, tol_eq, wit))
        return rep


def local_representative(atlas: OrbifoldAtlas, src: str, dst: str, point) -> tuple:
    """Return the canonical (hom, phi) representing src -> dst near ``point``.

    Representatives are unique up to composing with some mu in the target
    group.  Among all mu-translates we keep the one whose image matches the
    source point best in global coordinates; ties go to the lowest index.
    """
    p = np.asarray(point, dtype=float).reshape(-1)
    sc, dc = atlas.chart(src), atlas.chart(dst)
    cands = [t for t in atlas.find(src, dst) if t.applies(p)[0] and sc.domain.contains(p)[0]]
    if not cands and src == dst and sc.domain.contains(p)[0]:
        n = sc.dim
        cands = [Transition(src, dst, tuple(range(sc.group.order)), MapExpr.identity(n))]
    if not cands:
        raise VfckitError("NOT_IN_OVERLAP", f"{p.tolist()} has no representative from {src} to {dst}", witness=p)
    tr = cands[0]
    target = atlas.gcoord(src, p)[0]
    img = tr.phi.at(p)
    best, best_mu = np.inf, 0
    for mu, e in enumerate(dc.group.elements):
        d = float(np.linalg.norm(atlas.gcoord(dst, e @ img)[0] - target))
        if d < best - 1e-12:
            best, best_mu = d, mu
    if best_mu == dc.group.identity:
        return tr.hom, tr.phi
    m = dc.group.elements[best_mu]
    minv = dc.group.inverse[best_mu]
    msym = sp.Matrix(m.shape[0], m.shape[1], [sp.nsimplify(float(v), rational=True) for v in m.ravel()])
    phi = MapExpr(tuple(msym * sp.Matrix(list(tr.phi.exprs))), tr.phi.ydim, tr.phi.wdim)
    hom = tuple(int(dc.group.table[dc.group.table[best_mu, h], minv]) for h in tr.hom)
    return hom, phi


# -- differential forms ----------------------------------------------------------


def _sort_sign(idx: Sequence[int]) -> tuple:
    """(sign, sorted tuple) for a wedge monomial; sign 0 if an index repeats."""
    idx = list(idx)
    if len(set(idx)) < len(idx):
        return 0, ()
    sign = 1
    for i in range(len(idx)):
        for j in range(i + 1, len(idx)):
            if idx[i] > idx[j]:
                sign = -sign
    return sign, tuple(sorted(idx))


@dataclass(frozen=True)
class DifferentialForm:
    """A k-form on an n-dimensional chart; keys are sorted 0-based index tuples."""

    dim: int
    degree: int
    coeffs: tuple  # tuple of (index tuple, sympy expr), sorted by index

    @classmethod
    def make(cls, dim: int, degree: int, coeffs: dict) -> "DifferentialForm":
        if degree > dim or degree < 0:
            raise VfckitError("DEGREE_OVERFLOW", f"degree {degree} on a {dim}-dimensional chart")
        out = {}
        for idx, c in coeffs.items():
            idx = tuple(idx)
            if len(idx) != degree or any(i < 0 or i >= dim for i in idx):
                raise VfckitError("TYPE_ERROR", f"bad multi-index {idx} for a {degree}-form in dimension {dim}")
            sign, key = _sort_sign(idx)
            if sign == 0:
                continue
            out[key] = out.get(key, sp.Integer(0)) + sign * sp.sympify(c)
        items = tuple(sorted((k, sp.expand(v) if v.is_polynomial() else v) for k, v in out.items() if sp.simplify(v) != 0))
        return cls(dim, degree, items)

    @classmethod
    def function(cls, dim: int, expr) -> "DifferentialForm":
        return cls.make(dim, 0, {(): expr})

    @classmethod
    def volume(cls, dim: int, expr=1) -> "DifferentialForm":
        return cls.make(dim, dim, {tuple(range(dim)): expr})

    @property
    def as_dict(self) -> dict:
        return dict(self.coeffs)

    def coefficient(self, idx) -> sp.Expr:
        sign, key = _sort_sign(idx)
        return sign * self.as_dict.get(key, sp.Integer(0))

    def is_zero(self) -> bool:
        return len(self.coeffs) == 0

    def __add__(self, other: "DifferentialForm") -> "DifferentialForm":
        if (self.dim, self.degree) != (other.dim, other.degree):
            raise VfckitError("TYPE_ERROR", "adding forms of different type")
        d = self.as_dict
        for k, v in other.coeffs:
            d[k] = d.get(k, 0) + v
        return DifferentialForm.make(self.dim, self.degree, d)

    def scale(self, c) -> "DifferentialForm":
        return DifferentialForm.make(self.dim, self.degree, {k: sp.sympify(c) * v for k, v in self.coeffs})

    def wedge(self, other: "DifferentialForm") -> "DifferentialForm":
        if self.dim != other.dim:
            raise VfckitError("TYPE_ERROR", "wedge of forms on different charts")
        deg = self.degree + other.degree
        if deg > self.dim:
            return DifferentialForm(self.dim, deg, ())
        out = {}
        for ka, va in self.coeffs:
            for kb, vb in other.coeffs:
                sign, key = _sort_sign(ka + kb)
                if sign:
                    out[key] = out.get(key, 0) + sign * va * vb
        return DifferentialForm.make(self.dim, deg, out)

    def d(self) -> "DifferentialForm":
        """Exterior derivative (symbolic)."""
        if self.degree + 1 > self.dim:
            raise VfckitError("DEGREE_OVERFLOW", f"d of a {self.degree}-form on a {self.dim}-dimensional chart")
        out = {}
        for key, v in self.coeffs:
            for j in range(self.dim):
                dv = sp.diff(v, Y(j + 1))
                if dv == 0:
                    continue
                sign, k2 = _sort_sign((j,) + key)
                if sign:
                    out[k2] = out.get(k2, 0) + sign * dv
        return DifferentialForm.make(self.dim, self.degree + 1, out)

    def pullback(self, phi: MapExpr) -> "DifferentialForm":
        """Pull back along phi: (source chart, dim phi.ydim) -> this chart."""
        if phi.dim != self.dim:
            raise VfckitError("TYPE_ERROR", f"map has {phi.dim} outputs, form lives in dimension {self.dim}")
        m = phi.ydim
        if self.degree > m:
            return DifferentialForm(m, self.degree, ())
        sub = {Y(i + 1): phi.exprs[i] for i in range(self.dim)}
        jac = sp.Matrix([[sp.diff(e, Y(j + 1)) for j in range(m)] for e in phi.exprs])
        out = {}
        for key, v in self.coeffs:
            vv = sp.sympify(v).subs(sub, simultaneous=True)
            for J in itertools.combinations(range(m), self.degree):
                minor = jac.extract(list(key), list(J)).det() if self.degree else sp.Integer(1)
                if minor != 0:
                    out[J] = out.get(J, 0) + vv * minor
        return DifferentialForm.make(m, self.degree, out)

    def evaluate(self, pts) -> dict:
        """Coefficient values at points: {index tuple: array}."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.coeffs:
            return {}
        keys = [k for k, _ in self.coeffs]
        vals = evaluate([v for _, v in self.coeffs], ysyms(self.dim) + (T,), np.hstack([pts, np.zeros((len(pts), 1))]))
        return {k: vals[:, i] for i, k in enumerate(keys)}

    def dense(self, pts) -> np.ndarray:
        """Coefficients as an array (N, C(dim, degree)) in lexicographic index order."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = list(itertools.combinations(range(self.dim), self.degree))
        vals = self.evaluate(pts)
        out = np.zeros((len(pts), len(idx)))
        for c, key in enumerate(idx):
            if key in vals:
                out[:, c] = vals[key]
        return out

    def apply(self, pts, vectors) -> np.ndarray:
        """Evaluate on tangent vectors: ``vectors`` has shape (N, degree, dim)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self.evaluate(pts)
        out = np.zeros(len(pts))
        if self.degree == 0:
            return vals.get((), out)
        vectors = np.asarray(vectors, dtype=float).reshape(len(pts), self.degree, self.dim)
        for key, coeff in vals.items():
            out += coeff * np.linalg.det(vectors[:, :, list(key)])
        return out

    def group_invariance_residual(self, group: FiniteGroupAction, pts) -> float:
        worst = 0.0
        base = self.dense(pts)
        for e in group.elements:
            lin = MapExpr(tuple(sum(sp.nsimplify(float(e[i, j]), rational=True) * Y(j + 1) for j in range(self.dim)) for i in range(self.dim)), self.dim)
            pulled = self.pullback(lin).dense(pts)
            worst = max(worst, float(np.max(np.abs(pulled - base), initial=0.0)))
        return worst

    def to_dict(self) -> dict:
        from .expr import to_text

        return {"degree": self.degree, "coeffs": {"".join(str(i + 1) for i in k) or "0": to_text(v) for k, v in self.coeffs}}


def form_calculus(op: str, *args):
    """Dispatcher over wedge, exterior_derivative, pullback and evaluate."""
    if op == "wedge":
        return args[0].wedge(args[1])
    if op == "exterior_derivative":
        return args[0].d()
    if op == "pullback":
        return args[0].pullback(args[1])
    if op == "evaluate":
        return args[0].evaluate(args[1])
    raise VfckitError("TYPE_ERROR", f"unknown form operation {op!r}")


def numeric_exterior_derivative(fn: Callable, pt, h: float = 1e-5) -> np.ndarray:
    """Gradient of a scalar callable by central differences (the d of a 0-form)."""
    return numeric_jacobian(lambda x: np.atleast_2d(fn(x)).reshape(len(x), -1), pt, h)[0]


# -- partition of unity and integration ------------------------------------------


def group_average(expr: sp.Expr, group: FiniteGroupAction, dim: int) -> sp.Expr:
    """Average ``expr`` over the group action so the result is invariant."""
    if group.order == 1:
        return expr
    terms = []
    for e in group.elements:
        sub = {Y(i + 1): sum(sp.nsimplify(float(e[i, j]), rational=True) * Y(j + 1) for j in range(dim)) for i in range(dim)}
        terms.append(sp.sympify(expr).subs(sub, simultaneous=True))
    return sp.Add(*terms) / group.order


@dataclass
class PartitionOfUnity:
    """Invariant bumps beta_p with chi_p = beta_p / sum_q beta_q(transfer_pq)."""

    bumps: dict  # label -> sympy expression in the chart's coordinates
    dims: dict
    transfers: dict  # (p, q) -> (MapExpr, Optional[Domain]) from chart p to chart q

    def beta(self, label: str, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = self.dims[label]
        return evaluate([self.bumps[label]], ysyms(n) + (T,), np.hstack([pts, np.zeros((len(pts), 1))]))[:, 0]

    def total(self, label: str, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tot = self.beta(label, pts)
        for q in self.bumps:
            if q == label or (label, q) not in self.transfers:
                continue
            phi, dom = self.transfers[(label, q)]
            mask = np.ones(len(pts), dtype=bool) if dom is None else dom.contains(pts)
            if mask.any():
                vals = np.zeros(len(pts))
                with np.errstate(all="ignore"):
                    vals[mask] = self.beta(q, phi(pts[mask]))
                tot = tot + np.nan_to_num(vals)
        return tot

    def chi(self, label: str, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tot = self.total(label, pts)
        b = self.beta(label, pts)
        with np.errstate(all="ignore"):
            return np.where(tot > 0, b / np.where(tot > 0, tot, 1.0), 0.0)


def partition_of_unity(
    charts: dict,
    supports: dict,
    transfers: Optional[dict] = None,
    target: Optional[dict] = None,
    margin: float = 0.1,
) -> PartitionOfUnity:
    """Group-invariant bumps, one per chart, normalized across charts.

    ``supports[p]`` is a compact Box/Ball inside chart p; the bump equals 1 on
    it and vanishes outside its ``margin`` neighbourhood.  ``target`` maps a
    chart label to sample points (in that chart) that must be covered;
    an uncovered sample raises COVER_GAP.
    """
    bumps, dims = {}, {}
    for label, chart in charts.items():
        sup = supports.get(label)
        if sup is None:
            continue
        grown = _grow(sup, margin)
        bumps[label] = group_average(grown.bump(margin), chart.group, chart.dim)
        dims[label] = chart.dim
    pou = PartitionOfUnity(bumps, dims, dict(transfers or {}))
    for label, pts in (target or {}).items():
        pts = np.atleast_2d(pts)
        if label in bumps:
            tot = pou.total(label, pts)
        else:
            tot = np.zeros(len(pts))
            for q in bumps:
                if (label, q) in pou.transfers:
                    phi, dom = pou.transfers[(label, q)]
                    mask = np.ones(len(pts), dtype=bool) if dom is None else dom.contains(pts)
                    vals = np.zeros(len(pts))
                    if mask.any():
                        vals[mask] = pou.beta(q, phi(pts[mask]))
                    tot += vals
        gap = np.flatnonzero(~(tot > 1e-12))
        if len(gap):
            raise VfckitError("COVER_GAP", f"supports miss a point of chart {label}", witness=pts[gap[0]])
    return pou


def _grow(dom: Domain, margin: float) -> Domain:
    if isinstance(dom, Ball):
        return Ball(dom.center, dom.radius + margin)
    return Box(
        tuple(a if c else a - margin for a, c in zip(dom.lower, dom.closed_lower)),
        tuple(b if c else b + margin for b, c in zip(dom.upper, dom.closed_upper)),
        dom.closed_lower,
        dom.closed_upper,
    )


def integrate_top_form(charts: dict, forms: dict, pou: Optional[PartitionOfUnity] = None, q: int = 32) -> float:
    """Sum over charts of (1/#Gamma) * integral of chi * (top coefficient)."""
    total = 0.0
    for label in sorted(forms):
        form = forms[label]
        chart = charts[label]
        if form.degree != chart.dim:
            raise VfckitError("TYPE_ERROR", f"form on {label} has degree {form.degree}, chart dimension {chart.dim}")
        if form.is_zero():
            continue
        pts, wts = chart.domain.quadrature(q)
        vals = form.dense(pts)[:, 0]
        if pou is not None:
            vals = vals * pou.chi(label, pts)
        if not np.all(np.isfinite(vals)):
            raise VfckitError("QUADRATURE_DIVERGED", f"non-finite integrand on chart {label}", witness=pts[~np.isfinite(vals)][0])
        total += float(np.dot(vals, wts)) / chart.group.order
    return total
