"""Good coordinate systems, their axioms, construction, and embedding records."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import VfckitError
from .expr import MapExpr, MatrixExpr
from .kuranishi import CoordinateChange, KuranishiChart, KuranishiStructure, sum_chart, verify_change
from .numerics import gauss_newton
from .orbifold import Ball, Box, Domain
from .report import FAIL, INDETERMINATE, PASS, TOL, Check, Report


def default_support(dom: Domain, frac: float = 0.1) -> Domain:
    """A compact set inside ``dom``: open sides pulled in by ``frac`` of the extent."""
    if isinstance(dom, Ball):
        return Ball(dom.center, dom.radius * (1 - 2 * frac))
    return dom.shrink(frac * float(np.min(dom.hi - dom.lo)))


@dataclass
class GoodCoordinateSystem:
    """Poset-indexed charts with strong coordinate changes and support systems.

    ``nodes`` maps each poset element to its chart pieces (more than one
    piece for a sum chart).  ``order`` holds pairs (q, p) with q < p.
    """

    charts: dict
    nodes: dict
    order: set = field(default_factory=set)
    changes: list = field(default_factory=list)
    K: dict = field(default_factory=dict)
    Kprime: dict = field(default_factory=dict)
    K2: dict = field(default_factory=dict)
    K2prime: dict = field(default_factory=dict)
    extension_data: dict = field(default_factory=dict)
    label: str = "gcs"

    def __post_init__(self):
        for lab, ch in self.charts.items():
            if ch.rank == 0:
                # a bare manifold chart is its own zero set: supports are the whole chart
                for table in (self.K, self.Kprime, self.K2, self.K2prime):
                    table.setdefault(lab, ch.domain)
                continue
            self.K.setdefault(lab, default_support(ch.domain, 0.1))
            self.Kprime.setdefault(lab, default_support(ch.domain, 0.15))
            self.K2.setdefault(lab, default_support(ch.domain, 0.05))
            self.K2prime.setdefault(lab, default_support(ch.domain, 0.2))
        self.order = {tuple(p) for p in self.order}

    def node_of(self, piece: str) -> str:
        for n, pieces in self.nodes.items():
            if piece in pieces:
                return n
        raise VfckitError("UNRESOLVED_LABEL", f"piece {piece!r} belongs to no node")

    def less(self, q: str, p: str) -> bool:
        return (q, p) in self.order

    def comparable(self, a: str, b: str) -> bool:
        return a == b or self.less(a, b) or self.less(b, a)

    def node_order(self) -> list:
        """Nodes sorted so that every node comes after all nodes below it."""
        out, left = [], sorted(self.nodes)
        while left:
            ready = [n for n in left if not any(self.less(m, n) for m in left if m != n)]
            if not ready:
                raise VfckitError("TYPE_ERROR", "order relation has a cycle")
            out.append(ready[0])
            left.remove(ready[0])
        return out

    def pieces(self) -> list:
        return [p for n in self.node_order() for p in self.nodes[n]]

    def predecessors(self, piece: str) -> list:
        """Changes into ``piece`` from pieces of strictly smaller nodes."""
        return [c for c in self.changes if c.dst == piece and c.kind != "open"]

    def change(self, src: str, dst: str) -> Optional[CoordinateChange]:
        for c in self.changes:
            if c.src == src and c.dst == dst:
                return c
        return None

    def support(self, which: str = "K") -> dict:
        try:
            return {"K": self.K, "Kprime": self.Kprime, "K2": self.K2, "K2prime": self.K2prime}[which]
        except KeyError:
            raise VfckitError("UNRESOLVED_LABEL", f"unknown support system {which!r}") from None

    @property
    def vdim(self) -> int:
        vd = {c.vdim for c in self.charts.values()}
        if len(vd) != 1:
            raise VfckitError("DIM_MISMATCH", f"charts have different virtual dimensions {sorted(vd)}")
        return vd.pop()

    def quotient_distance(self, la: str, ya, lb: str, yb) -> float:
        ca, cb = self.charts[la], self.charts[lb]
        ga = ca.gc(ca.group.orbit(np.asarray(ya, dtype=float)))
        gb = cb.gc(cb.group.orbit(np.asarray(yb, dtype=float)))
        return float(np.min(np.linalg.norm(ga[:, None, :] - gb[None, :, :], axis=2)))

    def footprint_samples(self, per_dim: int = 12) -> list:
        """[(piece, chart point, global point)] over all zero-set samples."""
        out = []
        for lab in self.pieces():
            ch = self.charts[lab]
            for y in ch.zero_samples(per_dim):
                out.append((lab, y, ch.gc.at(y)))
        return out


def locate_in_chart(chart: KuranishiChart, gpoint: np.ndarray, region: Optional[Domain] = None, per_dim: int = 6, tol: float = 1e-9) -> Optional[np.ndarray]:
    """A point y of the zero set with gc(y) equal to ``gpoint`` (up to the group)."""
    region = region or chart.domain
    seeds = region.samples(per_dim)
    seeds = seeds[chart.domain.contains(seeds)]
    if not len(seeds):
        return None
    g = np.asarray(gpoint, dtype=float)
    dist = np.linalg.norm(chart.gc(seeds) - g, axis=1)
    jg = chart.gc.jacobian("y")

    def F(y):
        parts = [chart.gc(y) - g]
        if chart.rank:
            parts.append(chart.s(y))
        return np.hstack(parts)

    def J(y):
        parts = [jg(y)]
        if chart.rank:
            parts.append(chart.ds(y))
        return np.concatenate(parts, axis=1)

    for i in np.argsort(dist, kind="stable")[:6]:
        y, ok = gauss_newton(F, J, seeds[i], tol=tol)
        if ok and region.contains(y)[0] and chart.domain.contains(y)[0]:
            return y
    return None


def _transitivity(gcs: GoodCoordinateSystem, per_dim: int) -> tuple:
    worst, wit = 0.0, None
    for c1, c2 in itertools.product(gcs.changes, gcs.changes):
        if c1.dst != c2.src or c1.src == c2.dst:
            continue
        c3 = gcs.change(c1.src, c2.dst)
        if c3 is None:
            continue
        r = gcs.charts[c1.src]
        p = gcs.charts[c2.dst]
        pts = r.zero_samples(per_dim)
        if not len(pts):
            continue
        pts = pts[c1.applies(pts) & c3.applies(pts)]
        mid = c1.phi(pts) if len(pts) else pts
        keep = c2.applies(mid) if len(pts) else np.zeros(0, dtype=bool)
        pts, mid = pts[keep], mid[keep]
        for x, m in zip(pts, mid):
            lhs = c2.phi.at(m)
            rhs = c3.phi.at(x)
            d = min(float(np.linalg.norm(lhs - e @ rhs)) for e in p.group.elements)
            if d > worst:
                worst, wit = d, {"point": x, "triple": [c1.src, c1.dst, c2.dst]}
    return worst, wit


def verify_gcs_axioms(gcs: GoodCoordinateSystem, per_dim: int = 10, delta: float = TOL["delta_hd"], tol: float = TOL["struct"], check_changes: bool = True) -> Report:
    """Order, comparability, gluing consistency (Hausdorff), transitivity, covering."""
    rep = Report("verify_gcs_axioms")
    nodes = list(gcs.nodes)
    bad = None
    for (a, b) in gcs.order:
        if (b, a) in gcs.order or a == b:
            bad = {"pair": [a, b], "reason": "not antisymmetric"}
    for (a, b), (c, d) in itertools.product(gcs.order, gcs.order):
        if b == c and (a, d) not in gcs.order and a != d:
            bad = bad or {"pair": [a, d], "reason": "not transitive"}
    rep.add(Check("partial_order", PASS if bad is None else FAIL, witness=bad))
    if bad is not None:
        # the remaining checks walk nodes in order and are meaningless without one
        return rep

    if check_changes:
        worst_fail = None
        for c in gcs.changes:
            r = verify_change(c, gcs.charts, per_dim, strong=(c.kind == "strong"))
            if not r.passed:
                worst_fail = worst_fail or {"change": c.label, "checks": [f.name for f in r.failures()], "witness": r.failures()[0].witness}
        rep.add(Check("coordinate_changes", PASS if worst_fail is None else FAIL, witness=worst_fail))
        missing = None
        for c in gcs.changes:
            if c.kind == "open":
                continue
            if not gcs.less(gcs.node_of(c.src), gcs.node_of(c.dst)):
                missing = missing or {"change": c.label, "reason": "change between nodes that are not ordered"}
        rep.add(Check("changes_follow_order", PASS if missing is None else FAIL, witness=missing))

    foot = gcs.footprint_samples(per_dim)
    by_node = {n: [(lab, y, g) for (lab, y, g) in foot if lab in gcs.nodes[n]] for n in nodes}
    comp_bad, comp_min = None, np.inf
    for a, b in itertools.combinations(sorted(nodes), 2):
        if gcs.comparable(a, b):
            continue
        for (la, ya, _), (lb, yb, _) in itertools.product(by_node[a], by_node[b]):
            d = gcs.quotient_distance(la, ya, lb, yb)
            comp_min = min(comp_min, d)
            if d < delta and comp_bad is None:
                comp_bad = {"nodes": [a, b], "points": [ya, yb]}
    rep.add(Check("comparability", PASS if comp_bad is None else FAIL, None if comp_min == np.inf else comp_min, comp_bad))

    # Hausdorff / equivalence: a change must not identify distinct orbits, and
    # identified points must coincide in X.
    haus_bad, haus_worst = None, 0.0
    for c in gcs.changes:
        src, dst = gcs.charts[c.src], gcs.charts[c.dst]
        pts = (c.domain or src.domain).samples(per_dim)
        pts = pts[src.domain.contains(pts) & c.applies(pts)]
        zs = src.zero_samples(per_dim)
        zs = zs[c.applies(zs)] if len(zs) else zs
        pts = np.vstack([pts, zs]) if len(zs) else pts
        img = c.phi(pts)
        for i, j in itertools.combinations(range(len(pts)), 2):
            if min(np.linalg.norm(pts[i] - e @ pts[j]) for e in src.group.elements) < delta:
                continue
            dimg = min(np.linalg.norm(img[i] - e @ img[j]) for e in dst.group.elements)
            if dimg < 1e-9:
                haus_bad = haus_bad or {"change": c.label, "points": [pts[i], pts[j]]}
        for z in zs:
            d = gcs.quotient_distance(c.src, z, c.dst, c.phi.at(z))
            haus_worst = max(haus_worst, d)
            if d > delta:
                haus_bad = haus_bad or {"change": c.label, "point": z, "gap": d}
    rep.add(Check("hausdorff", PASS if haus_bad is None else FAIL, haus_worst, haus_bad, detail=f"sampled at resolution {delta}"))

    tw, twit = _transitivity(gcs, per_dim)
    status = PASS if tw <= tol else (INDETERMINATE if tw <= delta else FAIL)
    rep.add(Check("equivalence_transitivity", status, tw, None if status == PASS else twit))

    cov_bad = None
    for lab, y, g in foot:
        covered = False
        for p in gcs.pieces():
            K = gcs.K[p]
            if p == lab and K.contains(y, 1e-12)[0]:
                covered = True
                break
            if locate_in_chart(gcs.charts[p], g, K) is not None:
                covered = True
                break
        if not covered:
            cov_bad = {"piece": lab, "point": y}
            break
    rep.add(Check("support_covering", PASS if cov_bad is None else FAIL, witness=cov_bad))
    return rep


# -- embedding records -----------------------------------------------------------


@dataclass
class ChartMap:
    """Embedding of a source chart into a target chart (identity maps allowed)."""

    dst: str
    phi: MapExpr
    hom: tuple
    fiber: MatrixExpr
    domain: Optional[Domain] = None

    def applies(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.ones(len(pts), dtype=bool) if self.domain is None else self.domain.contains(pts)


def identity_map(chart: KuranishiChart, dst: Optional[str] = None, domain: Optional[Domain] = None) -> ChartMap:
    eye = MatrixExpr.constant(np.eye(chart.rank), chart.dim) if chart.rank else MatrixExpr((), chart.dim, 0, 0)
    return ChartMap(dst or chart.label, MapExpr.identity(chart.dim), tuple(range(chart.group.order)), eye, domain)


@dataclass
class EmbeddingRecord:
    kind: str  # KK, GG, KG or GK
    src_charts: dict
    dst_charts: dict
    maps: dict  # source piece -> ChartMap
    src_changes: list = field(default_factory=list)
    dst_changes: list = field(default_factory=list)
    index_map: dict = field(default_factory=dict)  # GG: source node -> target node
    src_order: set = field(default_factory=set)
    dst_order: set = field(default_factory=set)
    src_support: dict = field(default_factory=dict)  # GK: K_p per source piece


def _find(changes, src, dst):
    for c in changes:
        if c.src == src and c.dst == dst:
            return c
    return None


def verify_embedding_record(rec: EmbeddingRecord, per_dim: int = 10, tol: float = TOL["struct"]) -> Report:
    """Commuting squares, section compatibility, and the kind-specific domain conditions."""
    rep = Report(f"verify_embedding_record[{rec.kind}]")
    sec_w, sec_wit = 0.0, None
    for lab, m in rec.maps.items():
        src, dst = rec.src_charts[lab], rec.dst_charts[m.dst]
        pts = (m.domain or src.domain).samples(per_dim)
        pts = pts[src.domain.contains(pts) & m.applies(pts)]
        if not len(pts):
            continue
        lhs = (m.fiber(pts) @ src.s(pts)[..., None])[..., 0] if src.rank else np.zeros((len(pts), dst.rank))
        err = np.linalg.norm(lhs - dst.s(m.phi(pts)), axis=1)
        if err.max() > sec_w:
            sec_w, sec_wit = float(err.max()), {"chart": lab, "point": pts[int(err.argmax())]}
    rep.add(Check.from_residual("section_compatibility", sec_w, tol, sec_wit))

    sq_w, sq_wit = 0.0, None
    for c in rec.src_changes:
        if c.src not in rec.maps or c.dst not in rec.maps:
            continue
        mq, mp = rec.maps[c.src], rec.maps[c.dst]
        q = rec.src_charts[c.src]
        target = rec.dst_charts[mp.dst]
        pts = (c.domain or q.domain).samples(per_dim)
        pts = pts[q.domain.contains(pts) & c.applies(pts) & mq.applies(pts)]
        if not len(pts):
            continue
        left = mp.phi(c.phi(pts))
        if mq.dst == mp.dst:
            right = mq.phi(pts)
        else:
            c2 = _find(rec.dst_changes, mq.dst, mp.dst)
            if c2 is None:
                sq_wit = sq_wit or {"change": c.label, "reason": "no target change for the square"}
                sq_w = max(sq_w, np.inf)
                continue
            right = c2.phi(mq.phi(pts))
        for i in range(len(pts)):
            d = min(float(np.linalg.norm(left[i] - e @ right[i])) for e in target.group.elements)
            if d > sq_w:
                sq_w, sq_wit = d, {"change": c.label, "point": pts[i]}
    rep.add(Check.from_residual("commuting_squares", sq_w, tol, sq_wit))

    if rec.kind == "GG":
        ob = None
        for (q, p) in rec.src_order:
            iq, ip = rec.index_map.get(q), rec.index_map.get(p)
            if iq != ip and (iq, ip) not in rec.dst_order:
                ob = {"pair": [q, p]}
        rep.add(Check("order_preserving", PASS if ob is None else FAIL, witness=ob))
        dom_bad = None
        for c in rec.src_changes:
            mq, mp = rec.maps.get(c.src), rec.maps.get(c.dst)
            if mq is None or mp is None or mq.dst == mp.dst:
                continue
            c2 = _find(rec.dst_changes, mq.dst, mp.dst)
            q = rec.src_charts[c.src]
            pts = q.domain.samples(per_dim)
            pts = pts[q.domain.contains(pts) & mq.applies(pts)]
            a = c.applies(pts)
            b = c2.applies(mq.phi(pts)) if c2 is not None else np.zeros(len(pts), dtype=bool)
            mism = np.flatnonzero(a != b)
            if len(mism):
                dom_bad = dom_bad or {"change": c.label, "point": pts[mism[0]]}
        rep.add(Check("domain_condition", PASS if dom_bad is None else FAIL, witness=dom_bad))

    if rec.kind == "GK":
        cont_bad = None
        for lab, m in rec.maps.items():
            K = rec.src_support.get(lab) or rec.src_charts[lab].domain
            pts = K.samples(per_dim)
            out = ~m.applies(pts)
            if out.any():
                cont_bad = cont_bad or {"chart": lab, "point": pts[np.flatnonzero(out)[0]]}
                continue
            img = m.phi(pts)
            out = ~rec.dst_charts[m.dst].domain.contains(img)
            if out.any():
                cont_bad = cont_bad or {"chart": lab, "point": pts[np.flatnonzero(out)[0]]}
        rep.add(Check("support_in_domain", PASS if cont_bad is None else FAIL, witness=cont_bad))
    return rep


# -- construction ----------------------------------------------------------------


def _footprints_meet(a: KuranishiChart, b: KuranishiChart, per_dim: int, delta: float) -> bool:
    fa, fb = a.zero_samples(per_dim), b.zero_samples(per_dim)
    if not len(fa) or not len(fb):
        return False
    ga = np.vstack([a.gc(a.group.act(k, fa)) for k in range(a.group.order)])
    gb = b.gc(fb)
    return float(np.min(np.linalg.norm(ga[:, None, :] - gb[None, :, :], axis=2))) < delta


def build_gcs(
    ks: KuranishiStructure,
    supports: Optional[dict] = None,
    max_shrink: int = 20,
    per_dim: int = 10,
    delta: float = TOL["delta_hd"],
) -> tuple:
    """Chain poset by chart dimension, merging equal-dimension charts into sum charts.

    Domains are shrunk by halving margins until the axioms verify.  Returns
    (GoodCoordinateSystem, KG EmbeddingRecord, report of the final round).
    """
    by_dim = {}
    for lab in sorted(ks.charts):
        by_dim.setdefault(ks.charts[lab].dim, []).append(lab)
    dims = sorted(by_dim)
    nodes = {}
    for d in dims:
        labs = by_dim[d]
        name = labs[0] if len(labs) == 1 else "+".join(labs)
        for a, b in itertools.combinations(labs, 2):
            glued = [c for c in ks.changes if {c.src, c.dst} == {a, b}]
            if _footprints_meet(ks.charts[a], ks.charts[b], per_dim, delta) and not glued:
                raise VfckitError("INCOMPATIBLE_CHARTS", f"charts {a} and {b} overlap but are not glued")
            if glued:
                sum_chart(ks.charts[glued[0].src], ks.charts[glued[0].dst], glued[0])
        nodes[name] = labs
    names = [next(n for n, ls in nodes.items() if by_dim[d][0] in ls) for d in dims]
    order = {(names[i], names[j]) for i in range(len(names)) for j in range(i + 1, len(names))}
    for a, b in itertools.combinations(sorted(ks.charts), 2):
        ca, cb = ks.charts[a], ks.charts[b]
        if ca.dim == cb.dim:
            continue
        lo, hi = (a, b) if ca.dim < cb.dim else (b, a)
        if _footprints_meet(ks.charts[lo], ks.charts[hi], per_dim, delta) and ks.change(lo, hi) is None:
            raise VfckitError("INCOMPATIBLE_CHARTS", f"no coordinate change from {lo} to {hi} although footprints meet")

    changes = []
    for c in ks.changes:
        same = ks.charts[c.src].dim == ks.charts[c.dst].dim
        changes.append(CoordinateChange(c.label, c.src, c.dst, c.phi, c.hom, c.fiber, c.domain, "open" if same else "strong"))

    last = None
    for r in range(max_shrink + 1):
        charts = {}
        for lab, ch in ks.charts.items():
            ext = 0.5 * float(np.min(ch.domain.hi - ch.domain.lo))
            margin = 0.5 * ext * (1 - 0.5 ** r)
            dom = ch.domain if r == 0 else (Ball(ch.domain.center, ch.domain.radius - margin) if isinstance(ch.domain, Ball) else ch.domain.shrink(margin))
            charts[lab] = ch if r == 0 else ch.with_domain(dom)
        K = {lab: (supports or {}).get(lab) or (charts[lab].domain if charts[lab].rank == 0 else default_support(charts[lab].domain, 0.1)) for lab in charts}
        gcs = GoodCoordinateSystem(charts, nodes, order, changes, K=K, extension_data=dict(ks.extension_data), label="built")
        last = verify_gcs_axioms(gcs, per_dim, delta)
        if last.passed:
            maps = {lab: identity_map(ks.charts[lab], lab, charts[lab].domain) for lab in ks.charts}
            rec = EmbeddingRecord("KG", ks.charts, charts, maps, ks.changes, changes)
            return gcs, rec, last
    raise VfckitError("SHRINK_EXHAUSTED", f"axioms still fail after {max_shrink} shrink rounds", witness=[c.name for c in last.failures()])


# -- dimension stratification ----------------------------------------------------


def dimension_stratum(gcs: GoodCoordinateSystem, d: int, per_dim: int = 12) -> dict:
    """S_d: points of X lying in the footprint of a chart of dimension >= d."""
    high = [p for p in gcs.pieces() if gcs.charts[p].dim >= d]
    samples = []
    for p in high:
        ch = gcs.charts[p]
        z = ch.zero_samples(per_dim)
        if len(z):
            samples.append(ch.gc(z))
    samples = np.vstack(samples) if samples else np.zeros((0, 1))

    def contains(g) -> np.ndarray:
        g = np.atleast_2d(g)
        return np.array([any(locate_in_chart(gcs.charts[p], x) is not None for p in high) for x in g], dtype=bool)

    return {"d": d, "charts": high, "samples": samples, "contains": contains}


def stratum_closed_check(gcs: GoodCoordinateSystem, d: int, per_dim: int = 12, delta: float = TOL["delta_hd"]) -> Check:
    """Sampled closedness: points of X outside S_d stay away from S_d."""
    st = dimension_stratum(gcs, d, per_dim)
    inside = st["samples"]
    outside = []
    for lab, y, g in gcs.footprint_samples(per_dim):
        if gcs.charts[lab].dim < d and not st["contains"](g)[0]:
            outside.append(g)
    if not len(inside) or not outside:
        return Check("stratum_closed", PASS, None, detail="stratum or complement empty")
    outside = np.array(outside)
    dist = np.min(np.linalg.norm(outside[:, None, :] - inside[None, :, :], axis=2), axis=1)
    i = int(np.argmin(dist))
    ok = dist[i] > delta
    return Check("stratum_closed", PASS if ok else FAIL, float(dist[i]), None if ok else outside[i])
