"""Kuranishi charts, coordinate changes, products and normalized boundaries."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import sympy as sp

from .bundle import BundleChart, BundleEmbedding, equivariance_residual
from .errors import VfckitError
from .expr import MapExpr, MatrixExpr, Y, ysyms
from .numerics import cluster, newton, project_to_zeros
from .orbifold import Ball, Box, Domain, FiniteGroupAction, OrbifoldChart, verify_chart
from .report import FAIL, PASS, TOL, Check, Report


@dataclass
class KuranishiChart:
    """(U, E, s, psi): psi is realized through the global coordinate map ``gc``."""

    label: str
    bundle: BundleChart
    s: MapExpr
    gc: Optional[MapExpr] = None
    orientation: int = 1

    def __post_init__(self):
        if self.s.dim != self.bundle.fiber_dim:
            raise VfckitError("TYPE_ERROR", f"chart {self.label}: section has {self.s.dim} components, fiber dimension is {self.bundle.fiber_dim}")
        if self.gc is None:
            self.gc = MapExpr.identity(self.dim)

    @property
    def base(self) -> OrbifoldChart:
        return self.bundle.base

    @property
    def domain(self) -> Domain:
        return self.base.domain

    @property
    def group(self) -> FiniteGroupAction:
        return self.base.group

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def rank(self) -> int:
        return self.bundle.fiber_dim

    @property
    def vdim(self) -> int:
        return self.dim - self.rank

    @cached_property
    def ds(self) -> MatrixExpr:
        return self.s.jacobian("y")

    def psi(self, pts) -> np.ndarray:
        return self.gc(np.atleast_2d(pts))

    def with_domain(self, dom: Domain) -> "KuranishiChart":
        base = OrbifoldChart(self.base.label, dom, self.group, self.base.base_point)
        bundle = BundleChart(base, self.rank, self.bundle.representation, self.bundle.label)
        return replace(self, bundle=bundle)

    def zero_samples(self, per_dim: int = 12, domain: Optional[Domain] = None, section: Optional[MapExpr] = None, t: float = 0.0) -> np.ndarray:
        """Points of the zero set (deduplicated), found from a seed grid."""
        dom = domain or self.domain
        s = section or self.s
        seeds = dom.samples(per_dim)
        seeds = seeds[self.domain.contains(seeds)]
        if self.rank == 0:
            return seeds
        jac = s.jacobian("y")
        if self.vdim == 0:
            pts, ok = newton(lambda y: s(y, t=t), lambda y: jac(y, t=t), seeds)
        else:
            pts, ok = project_to_zeros(lambda y: s(y, t=t), lambda y: jac(y, t=t), seeds)
        pts = pts[ok]
        pts = pts[dom.contains(pts) & self.domain.contains(pts)]
        if len(pts) == 0:
            return pts.reshape(0, self.dim)
        if self.vdim == 0:
            lab = cluster(pts, 1e-8)
            pts = np.array([pts[lab == k][0] for k in range(lab.max() + 1)])
        return pts

    def verify(self, per_dim: int = 10, tol_eq: float = TOL["eq"]) -> Report:
        rep = Report("verify_chart")
        rep.merge(verify_chart(self.base, per_dim), prefix="orbifold.")
        rep.merge(self.bundle.verify(), prefix="bundle.")
        pts = self.domain.samples(per_dim)
        r, w = equivariance_residual(self.s, self.bundle, pts)
        rep.add(Check.from_residual("section_equivariance", r, tol_eq, w))
        return rep


@dataclass
class CoordinateChange:
    """Embedding of chart ``src`` into chart ``dst`` on the open set ``domain``."""

    label: str
    src: str
    dst: str
    phi: MapExpr
    hom: tuple
    fiber: MatrixExpr
    domain: Optional[Domain] = None
    kind: str = "strong"

    def embedding(self, charts: dict) -> BundleEmbedding:
        return BundleEmbedding(charts[self.src].bundle, charts[self.dst].bundle, self.phi, self.hom, self.fiber, self.domain)

    def applies(self, pts, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.domain is None:
            return np.ones(len(pts), dtype=bool)
        return self.domain.contains(pts, margin)


def _orth_complement(a: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis (columns) of the complement of the column space of a."""
    if a.size == 0:
        return np.eye(dim)
    u, sv, _ = np.linalg.svd(a, full_matrices=True)
    r = int(np.sum(sv > 1e-12 * max(1.0, sv.max(initial=0.0))))
    return u[:, r:]


def normal_derivative(change: CoordinateChange, charts: dict, x: np.ndarray) -> np.ndarray:
    """Matrix of Ds_2 : T U_2 / T U_1 -> E_2 / E_1 at the source point x."""
    c1, c2 = charts[change.src], charts[change.dst]
    y = change.phi.at(x)
    dphi = change.phi.jacobian("y").at(x)
    G = change.fiber.at(x) if c1.rank else np.zeros((c2.rank, 0))
    N = _orth_complement(dphi, c2.dim)
    Q = _orth_complement(G, c2.rank)
    ds2 = c2.ds.at(y) if c2.rank else np.zeros((0, c2.dim))
    return Q.T @ ds2 @ N


def verify_change(
    change: CoordinateChange,
    charts: dict,
    per_dim: int = 10,
    tol_eq: float = TOL["eq"],
    tol_rank: float = TOL["rank"],
    strong: Optional[bool] = None,
    delta: float = TOL["delta_hd"],
) -> Report:
    """Compatibility, normal-derivative isomorphism and (for strong kind) footprints."""
    c1, c2 = charts[change.src], charts[change.dst]
    rep = Report("verify_change")
    emb = change.embedding(charts)
    rep.merge(emb.verify(per_dim, tol_eq, tol_rank), prefix="embedding.")
    pts = emb.samples(per_dim)
    if c1.rank:
        lhs = (change.fiber(pts) @ c1.s(pts)[..., None])[..., 0]
    else:
        lhs = np.zeros((len(pts), c2.rank))
    rhs = c2.s(change.phi(pts))
    err = np.linalg.norm(lhs - rhs, axis=1)
    rep.add(Check.from_residual("section_compatibility", err.max(initial=0.0), tol_eq, pts[int(err.argmax())] if len(err) else None))
    psi_err = np.linalg.norm(c2.psi(change.phi(pts)) - c1.psi(pts), axis=1)

    zeros = c1.zero_samples(per_dim)
    zin = zeros[change.applies(zeros)] if len(zeros) else zeros
    smin, wit = np.inf, None
    for x in zin:
        m = normal_derivative(change, charts, x)
        if m.size == 0:
            continue
        if m.shape[0] != m.shape[1]:
            smin, wit = 0.0, x
            break
        sv = float(np.linalg.svd(m, compute_uv=False).min())
        if sv < smin:
            smin, wit = sv, x
    if smin == np.inf:
        rep.add(Check("normal_derivative", PASS, 1.0 if len(zin) else None, detail="no normal directions" if len(zin) else "no zeros in the overlap"))
    else:
        ok = smin > tol_rank
        rep.add(Check("normal_derivative", PASS if ok else FAIL, smin, None if ok else wit, detail="" if ok else "SINGULAR_NORMAL_DERIVATIVE"))
    if len(zin):
        fz = np.linalg.norm(c2.psi(change.phi(zin)) - c1.psi(zin), axis=1)
        rep.add(Check.from_residual("footprint_compatibility", fz.max(), tol_eq, zin[int(fz.argmax())]))

    if strong if strong is not None else change.kind == "strong":
        foot2 = c2.psi(c2.zero_samples(per_dim))
        bad = None
        for x in zeros:
            inside = bool(change.applies(x)[0])
            g = c1.psi(x)[0]
            d = _min_dist(g, foot2, c2, None)
            if not inside and d < delta:
                bad = {"point": x, "side": "footprint point outside the change domain"}
                break
        if bad is None and len(foot2):
            foot1_in = c1.psi(zin) if len(zin) else np.zeros((0, foot2.shape[1]))
            foot1_all = c1.psi(zeros) if len(zeros) else np.zeros((0, foot2.shape[1]))
            for g in foot2:
                if len(foot1_all) and np.min(np.linalg.norm(foot1_all - g, axis=1)) < delta:
                    if not len(foot1_in) or np.min(np.linalg.norm(foot1_in - g, axis=1)) >= delta:
                        bad = {"global_point": g, "side": "shared footprint point not reached by the change"}
                        break
        rep.add(Check("strong_footprint", PASS if bad is None else FAIL, witness=bad))
    return rep


def _min_dist(g: np.ndarray, cloud: np.ndarray, chart, _unused) -> float:
    if len(cloud) == 0:
        return np.inf
    return float(np.min(np.linalg.norm(cloud - g, axis=1)))


# -- Kuranishi structures --------------------------------------------------------


@dataclass
class KuranishiStructure:
    """Finite generating family of charts with coordinate changes."""

    charts: dict
    changes: list = field(default_factory=list)
    extension_data: dict = field(default_factory=dict)

    def change(self, src: str, dst: str) -> Optional[CoordinateChange]:
        for c in self.changes:
            if c.src == src and c.dst == dst:
                return c
        return None


def verify_structure_cocycle(ks: KuranishiStructure, per_dim: int = 10, tol: float = TOL["cocycle"]) -> Report:
    """Phi_pr = Phi_pq o Phi_qr on triple overlaps, minimized over the target group."""
    rep = Report("verify_structure_cocycle")
    worst, wit, triples = 0.0, None, 0
    for c_rq, c_qp in itertools.product(ks.changes, ks.changes):
        if c_rq.dst != c_qp.src or c_rq.src == c_qp.dst:
            continue
        c_rp = ks.change(c_rq.src, c_qp.dst)
        if c_rp is None:
            continue
        triples += 1
        r = ks.charts[c_rq.src]
        p = ks.charts[c_qp.dst]
        pts = (c_rq.domain or r.domain).samples(per_dim)
        pts = pts[r.domain.contains(pts) & c_rq.applies(pts) & c_rp.applies(pts)]
        mid = c_rq.phi(pts)
        keep = c_qp.applies(mid)
        pts, mid = pts[keep], mid[keep]
        if not len(pts):
            continue
        lhs = c_qp.phi(mid)
        rhs = c_rp.phi(pts)
        Gl = (c_qp.fiber(mid) @ c_rq.fiber(pts)) if r.rank else None
        Gr = c_rp.fiber(pts) if r.rank else None
        for i in range(len(pts)):
            best = np.inf
            for mu, e in enumerate(p.group.elements):
                d = float(np.linalg.norm(lhs[i] - e @ rhs[i]))
                if Gl is not None and Gl[i].size:
                    d = max(d, float(np.max(np.abs(Gl[i] - p.bundle.rho(mu) @ Gr[i]))))
                best = min(best, d)
            if best > worst:
                worst, wit = best, {"point": pts[i], "triple": [c_rq.src, c_rq.dst, c_qp.dst]}
    rep.add(Check.from_residual("cocycle", worst, tol, wit, detail=f"{triples} triple(s) checked"))
    rep.results["triples"] = triples
    return rep


# -- sum charts ------------------------------------------------------------------


@dataclass
class SumChart:
    """Charts of equal dimension glued along open coordinate changes."""

    label: str
    pieces: list
    gluings: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.pieces[0].dim

    @property
    def vdim(self) -> int:
        return self.pieces[0].vdim

    def footprint(self, per_dim: int = 12) -> np.ndarray:
        clouds = [c.psi(c.zero_samples(per_dim)) for c in self.pieces]
        clouds = [c for c in clouds if len(c)]
        return np.vstack(clouds) if clouds else np.zeros((0, 1))


def sum_chart(c1: KuranishiChart, c2: KuranishiChart, change: Optional[CoordinateChange] = None, label: Optional[str] = None, per_dim: int = 20) -> SumChart:
    """Glue two equal-dimensional charts along an open change (or disjointly)."""
    if c1.dim != c2.dim or c1.rank != c2.rank:
        raise VfckitError("DIM_MISMATCH", f"cannot sum charts of dimensions {c1.dim} and {c2.dim}")
    label = label or f"{c1.label}+{c2.label}"
    if change is None:
        return SumChart(label, [c1, c2], [])
    # properness on the overlap: points approaching the edge of the change's
    # domain must not map into a compact part of the interior of c2
    dom = change.domain or c1.domain
    pts = dom.samples(per_dim)
    pts = pts[c1.domain.contains(pts)]
    img = change.phi(pts)
    edge = np.ones(len(pts), dtype=bool)
    edge &= ~dom.contains(pts, margin=1.5 * _spacing(dom, per_dim))
    inner2 = c2.domain.contains(img, margin=0.25 * _extent(c2.domain))
    inside1 = c1.domain.contains(pts, margin=1.5 * _spacing(c1.domain, per_dim))
    bad = np.flatnonzero(edge & inner2 & inside1)
    if len(bad):
        raise VfckitError("NOT_PROPER", "gluing map is not proper on the overlap", witness=pts[bad[0]])
    return SumChart(label, [c1, c2], [change])


def _spacing(dom: Domain, per_dim: int) -> float:
    return float(np.max(dom.hi - dom.lo)) / per_dim


def _extent(dom: Domain) -> float:
    return float(np.min(dom.hi - dom.lo))


# -- products --------------------------------------------------------------------


def _shift(expr_list, offset: int, n: int):
    sub = {Y(i + 1): Y(i + 1 + offset) for i in range(n)}
    return tuple(sp.sympify(e).subs(sub, simultaneous=True) for e in expr_list)


def _block(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def product_chart(a: KuranishiChart, b: KuranishiChart, extra: Sequence = (), label: Optional[str] = None) -> KuranishiChart:
    """Direct product; ``extra`` appends further section components (in product coordinates)."""
    if not isinstance(a.domain, Box) or not isinstance(b.domain, Box):
        raise VfckitError("MODE_UNSUPPORTED", "products are implemented for box charts")
    da, db = a.domain, b.domain
    dom = Box(da.lower + db.lower, da.upper + db.upper, da.closed_lower + db.closed_lower, da.closed_upper + db.closed_upper)
    elems, reps = [], []
    for i, j in itertools.product(range(a.group.order), range(b.group.order)):
        elems.append(_block(a.group.elements[i], b.group.elements[j]))
        rep = _block(a.bundle.rho(i), b.bundle.rho(j))
        k = len(extra)
        reps.append(_block(rep, np.eye(k)) if k else rep)
    n = a.dim + b.dim
    base = OrbifoldChart(label or f"{a.label}x{b.label}", dom, FiniteGroupAction(elems), tuple(a.base.base_point) + tuple(b.base.base_point))
    exprs = tuple(a.s.exprs) + _shift(b.s.exprs, a.dim, b.dim) + tuple(extra)
    bundle = BundleChart(base, len(exprs), reps)
    gc = MapExpr(tuple(a.gc.exprs) + _shift(b.gc.exprs, a.dim, b.dim), n)
    return KuranishiChart(base.label, bundle, MapExpr(exprs, n), gc, a.orientation * b.orientation)


def check_transversal_maps(a: KuranishiChart, fa: MapExpr, b: KuranishiChart, fb: MapExpr, per_dim: int = 8, tol_rank: float = TOL["rank"]) -> Check:
    """Weak transversality: [Df_a, -Df_b] onto TM at sampled pairs with f_a = f_b."""
    m = fa.dim
    xa = a.domain.samples(per_dim)
    seeds_b = b.domain.samples(per_dim)
    ja, jb = fa.jacobian("y"), fb.jacobian("y")
    worst, wit, pairs = np.inf, None, 0
    for x in xa:
        target = fa.at(x)
        F = lambda y: fb(y) - target
        ys, ok = project_to_zeros(F, lambda y: jb(y), seeds_b[: min(len(seeds_b), 4 ** b.dim)])
        ys = ys[ok & b.domain.contains(ys)]
        for y in ys[:1]:
            pairs += 1
            mat = np.hstack([ja.at(x), -jb.at(y)])
            sv = float(np.linalg.svd(mat, compute_uv=False).min()) if m else np.inf
            if mat.shape[1] < m:
                sv = 0.0
            if sv < worst:
                worst, wit = sv, {"a": x, "b": y}
    if pairs == 0:
        return Check("weak_transversality", PASS, None, detail="no pairs with matching images")
    status = PASS if worst > tol_rank else FAIL
    return Check("weak_transversality", status, worst, None if status == PASS else wit)


def _is_identity(f: MapExpr, n: int) -> bool:
    return f.dim == n and f.ydim == n and all(sp.simplify(e - Y(i + 1)) == 0 for i, e in enumerate(f.exprs))


def product_and_fiber_product(
    a: KuranishiChart,
    fa: Optional[MapExpr],
    b: KuranishiChart,
    fb: Optional[MapExpr],
    eliminate: bool = True,
    check_effective: bool = True,
) -> KuranishiChart:
    """Direct product (maps None or 0-dimensional target) or fiber product over M.

    When one map is the identity of M the fiber product is taken by
    elimination (the other chart with the pulled-back section); otherwise the
    fiber product is presented on U_a x U_b with the extra section f_a - f_b.
    """
    if fa is None or fb is None or fa.dim == 0:
        out = product_chart(a, b)
    else:
        if fa.dim != fb.dim:
            raise VfckitError("TYPE_ERROR", "maps to M must have the same target dimension")
        chk = check_transversal_maps(a, fa, b, fb)
        if chk.status == FAIL:
            raise VfckitError("NOT_TRANSVERSAL", "d f_a and d f_b do not span TM", witness=chk.witness)
        if eliminate and b.group.order == 1 and _is_identity(fb, b.dim):
            out = _eliminate(a, fa, b, f"{a.label}x{b.label}")
        elif eliminate and a.group.order == 1 and _is_identity(fa, a.dim):
            out = _eliminate(b, fb, a, f"{a.label}x{b.label}", swap=True)
        else:
            diff = tuple(e1 - e2 for e1, e2 in zip(fa.exprs, _shift(fb.exprs, a.dim, b.dim)))
            out = product_chart(a, b, extra=diff)
    if check_effective:
        eff = verify_chart(out.base).check("effectivity")
        if eff.status == FAIL:
            raise VfckitError("EFFECTIVITY_LOST", "fiber product chart is not effective", witness=eff.witness)
    return out


def _eliminate(a: KuranishiChart, fa: MapExpr, b: KuranishiChart, label: str, swap: bool = False) -> KuranishiChart:
    """a x_M M-chart b, where b's map is the identity: section (s_a, s_b o f_a)."""
    pulled = b.s.compose(fa) if b.rank else MapExpr((), a.dim)
    exprs = (tuple(pulled.exprs) + tuple(a.s.exprs)) if swap else (tuple(a.s.exprs) + tuple(pulled.exprs))
    reps = [_block(a.bundle.rho(i), np.eye(b.rank)) if not swap else _block(np.eye(b.rank), a.bundle.rho(i)) for i in range(a.group.order)]
    base = OrbifoldChart(label, a.domain, a.group, a.base.base_point)
    bundle = BundleChart(base, len(exprs), reps)
    return KuranishiChart(label, bundle, MapExpr(exprs, a.dim), a.gc, a.orientation * b.orientation)


def associativity_check(a, fa, b, gb, hb, c, fc) -> Check:
    """(a x_M1 b) x_M2 c versus a x_M1 (b x_M2 c) in the extra-section model.

    ``gb``: b -> M1, ``hb``: b -> M2.  Both sides live on U_a x U_b x U_c and
    must carry the same set of section components.
    """
    ab = product_and_fiber_product(a, fa, b, gb, eliminate=False, check_effective=False)
    hb_ab = MapExpr(_shift(hb.exprs, a.dim, b.dim), ab.dim)
    left = product_and_fiber_product(ab, hb_ab, c, fc, eliminate=False, check_effective=False)
    bc = product_and_fiber_product(b, hb, c, fc, eliminate=False, check_effective=False)
    gb_bc = MapExpr(tuple(gb.exprs), bc.dim)
    right = product_and_fiber_product(a, fa, bc, gb_bc, eliminate=False, check_effective=False)
    ls = sorted(str(sp.expand(e)) for e in left.s.exprs)
    rs = sorted(sorted_abs(str(sp.expand(e))) for e in right.s.exprs)
    ls = sorted(sorted_abs(x) for x in ls)
    same_dom = left.domain == right.domain
    ok = ls == rs and same_dom
    return Check("fiber_product_associativity", PASS if ok else FAIL, 0.0 if ok else 1.0, None if ok else {"left": ls, "right": rs})


def sorted_abs(text: str) -> str:
    """Identify a component with its negative (orientation of the extra factor)."""
    neg = str(sp.expand(-sp.sympify(text)))
    return min(text, neg)


# -- boundary and corners --------------------------------------------------------


@dataclass
class BoundaryData:
    parent: KuranishiChart
    charts: list  # boundary KuranishiCharts
    faces: list  # face tuple per boundary chart
    covering: Report


def _face_stabilizer(chart: KuranishiChart, face) -> list:
    i = face[0]
    out = []
    dom = chart.domain
    fs = dom.face_samples(face, 4)
    for k, e in enumerate(chart.group.elements):
        if np.all(dom.on_face(fs @ e.T, face)):
            out.append(k)
    return out


def boundary_chart(chart: KuranishiChart, face) -> KuranishiChart:
    """Restriction of a chart to one closed face, with the induced orientation."""
    i, side, value = face
    n = chart.dim
    keep = [j for j in range(n) if j != i]
    sub = {Y(i + 1): sp.nsimplify(value, rational=True)}
    for new, old in enumerate(keep):
        sub[Y(old + 1)] = Y(new + 1)

    def restrict(exprs):
        return tuple(sp.sympify(e).subs(sub, simultaneous=True) for e in exprs)

    idx = _face_stabilizer(chart, face)
    elems = [np.delete(np.delete(chart.group.elements[k], i, 0), i, 1) for k in idx]
    reps = [chart.bundle.rho(k) for k in idx]
    dom = chart.domain.face_domain(face)
    bp = tuple(v for j, v in enumerate(chart.base.base_point) if j != i)
    if not dom.contains(np.array(bp))[0]:
        bp = None
    side_sign = -1 if side == "lower" else 1
    label = f"{chart.label}@{side}{i + 1}"
    base = OrbifoldChart(label, dom, FiniteGroupAction(elems, dim=n - 1), bp)
    bundle = BundleChart(base, chart.rank, reps)
    orient = chart.orientation * (-1) ** i * side_sign
    return KuranishiChart(label, bundle, MapExpr(restrict(chart.s.exprs), n - 1), MapExpr(restrict(chart.gc.exprs), n - 1), orient)


def normalized_boundary(chart: KuranishiChart, per_dim: int = 6) -> BoundaryData:
    """One boundary chart per closed face orbit; checks the covering multiplicity."""
    dom = chart.domain
    faces = dom.faces() if isinstance(dom, Box) else []
    reps, seen = [], set()
    for f in faces:
        if f[:2] in seen:
            continue
        orbit = {f[:2]}
        fs = dom.face_samples(f, 4)
        for e in chart.group.elements:
            img = fs @ e.T
            for g in faces:
                if np.all(dom.on_face(img, g)):
                    orbit.add(g[:2])
        seen |= orbit
        reps.append(f)
    charts = [boundary_chart(chart, f) for f in reps]
    cov = Report("boundary_covering")
    for k in range(1, len(faces) + 1):
        pts = stratum_samples(chart, k, per_dim)
        if not len(pts):
            continue
        counts = np.zeros(len(pts), dtype=int)
        for f in faces:
            counts += dom.on_face(pts, f).astype(int)
        bad = np.flatnonzero(counts != k)
        cov.add(Check(f"covering_codim{k}", PASS if not len(bad) else FAIL, float(k), pts[bad[0]] if len(bad) else None, detail=f"{k}-to-1 over S_{k}"))
    return BoundaryData(chart, charts, reps, cov)


def stratum_samples(chart: KuranishiChart, k: int, per_dim: int = 6) -> np.ndarray:
    """Samples of S_k: points lying on exactly k closed faces of a box chart."""
    dom = chart.domain
    if not isinstance(dom, Box):
        return chart.domain.samples(per_dim) if k == 0 else np.zeros((0, chart.dim))
    faces = dom.faces()
    if k == 0:
        return dom.samples(per_dim)
    out = []
    for combo in itertools.combinations(faces, k):
        axes = [f[0] for f in combo]
        if len(set(axes)) < k:
            continue
        pts = dom.samples(per_dim)
        for f in combo:
            pts[:, f[0]] = f[2]
        out.append(pts)
    if not out:
        return np.zeros((0, chart.dim))
    return np.unique(np.vstack(out), axis=0)


def in_stratum(chart: KuranishiChart, pts, k: int, tol: float = 1e-9) -> np.ndarray:
    dom = chart.domain
    pts = np.atleast_2d(pts)
    if not isinstance(dom, Box):
        return np.full(len(pts), k == 0)
    counts = np.zeros(len(pts), dtype=int)
    for f in dom.faces():
        counts += dom.on_face(pts, f, tol).astype(int)
    return (counts == k) & dom.contains(pts)


def strata(chart: KuranishiChart, k: int, per_dim: int = 6) -> dict:
    """Corner stratum S_k: a membership predicate and sample points."""
    return {"k": k, "contains": lambda p: in_stratum(chart, p, k), "samples": stratum_samples(chart, k, per_dim)}
