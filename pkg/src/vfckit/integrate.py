"""Integration on perturbed zero sets, pushouts, Stokes, correspondences and invariance.

Zero sets of dimension 0 are found by Newton iteration seeded on a grid and
batched over the quadrature nodes of the parameter space W.  Zero sets of
dimension 1 are traced by a pseudo-arclength predictor-corrector and then
integrated with Gauss-Legendre panels placed on the exact curve (chord
parametrization, corrected onto the curve), so the quadrature error falls
spectrally with the panel order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from scipy.spatial import cKDTree

from .errors import VfckitError
from .expr import MapExpr, Y, coerce_expr
from .gcs import GoodCoordinateSystem
from .kuranishi import KuranishiChart, boundary_chart, normalized_boundary
from .numerics import cluster, gauss_legendre, project_to_zeros, sorted_rows
from .orbifold import Ball, Box, DifferentialForm, Domain, PartitionOfUnity, partition_of_unity
from .perturbation import CFPerturbation, CFSystem
from .report import FAIL, GL_ORDER, GRID, PASS, TOL, Check, Report

H_TRACE = TOL["h_trace"]
W_ORDER = 16
PANEL = 1.0


# -- systems ---------------------------------------------------------------------


def fiber_system(section: MapExpr, f: Optional[MapExpr] = None, level: Optional[float] = None) -> MapExpr:
    """The equations cutting out a zero set, or one fiber of it: (f - c, s).

    The row order fixes orientations: points carry sign det[Df; Ds] and curves
    the tangent T with det[T; Df; Ds] > 0 (fiber first, then base).
    """
    if f is None:
        return section
    c = sp.nsimplify(float(level), rational=True)
    return MapExpr((f.exprs[0] - c,) + tuple(section.exprs), section.ydim, section.wdim)


def oriented_tangent(J: np.ndarray) -> np.ndarray:
    """Kernel vector T of a full-rank (n-1) x n matrix with det[T; J] > 0."""
    n = J.shape[1]
    if n == 1:
        return np.ones(1)
    return np.array([(-1) ** j * np.linalg.det(np.delete(J, j, axis=1)) for j in range(n)])


def restrict_to_face(m: MapExpr, face) -> MapExpr:
    """Substitute y_i = value on a face and renumber the remaining variables."""
    i, _, value = face
    n = m.ydim
    sub = {Y(i + 1): sp.nsimplify(value, rational=True)}
    for new, old in enumerate([j for j in range(n) if j != i]):
        sub[Y(old + 1)] = Y(new + 1)
    return MapExpr(tuple(sp.sympify(e).subs(sub, simultaneous=True) for e in m.exprs), n - 1, m.wdim)


def lift_from_face(pts: np.ndarray, face) -> np.ndarray:
    i, _, value = face
    pts = np.atleast_2d(pts)
    return np.insert(pts, i, value, axis=1)


# -- zero-dimensional zero sets ----------------------------------------------------


def _newton_w(system: MapExpr, y: np.ndarray, w: np.ndarray, t: float, tol: float = TOL["newton"], maxit: int = 50) -> tuple:
    """Newton on square systems with a per-row parameter w."""
    jac = system.jacobian("y")
    y = np.array(y, dtype=float, copy=True)
    done = np.zeros(len(y), dtype=bool)
    active = np.ones(len(y), dtype=bool)
    for _ in range(maxit + 1):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        f = system(y[idx], w[idx], t)
        res = np.max(np.abs(f), axis=1)
        good = np.isfinite(res) & (res < tol)
        bad = ~np.isfinite(res) | (np.abs(y[idx]).max(axis=1) > 1e6)
        done[idx[good]] = True
        active[idx[good | bad]] = False
        keep = ~(good | bad)
        idx, f = idx[keep], f[keep]
        if not idx.size:
            break
        j = jac(y[idx], w[idx], t)
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(j, f[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(j, f)])
        y[idx] -= step
    return y, done


@dataclass
class PointSet:
    """Signed zeros, one block per parameter node: rows of (w index, y, sign)."""

    widx: np.ndarray
    points: np.ndarray
    signs: np.ndarray


def zero_points(system: MapExpr, dom: Domain, t: float, wpts: np.ndarray, grid: int = GRID, orientation: int = 1, tol_det: float = TOL["det"]) -> PointSet:
    """Transversal zeros of a square system for every parameter node."""
    n = system.ydim
    wpts = np.atleast_2d(wpts)
    if system.dim != n:
        raise VfckitError("TYPE_ERROR", f"{system.dim} equations in {n} unknowns do not cut out points")
    seeds = dom.samples(grid)
    if n == 0:
        seeds = np.zeros((1, 0))
    ns, nw = len(seeds), len(wpts)
    ys = np.tile(seeds, (nw, 1))
    ws = np.repeat(wpts, ns, axis=0)
    wi = np.repeat(np.arange(nw), ns)
    if n:
        ys, ok = _newton_w(system, ys, ws, t)
        ok &= dom.contains(ys)
    else:
        ok = np.ones(len(ys), dtype=bool)
    out_w, out_y = [], []
    ys, ws, wi = ys[ok], ws[ok], wi[ok]
    for k in np.unique(wi):
        pts = ys[wi == k]
        lab = cluster(pts, 1e-8)
        reps = sorted_rows(np.array([pts[lab == c][0] for c in range(lab.max() + 1)]))
        out_w += [k] * len(reps)
        out_y.append(reps)
    if not out_y:
        return PointSet(np.zeros(0, dtype=int), np.zeros((0, n)), np.zeros(0))
    widx = np.array(out_w, dtype=int)
    pts = np.vstack(out_y)
    if n:
        J = system.jacobian("y")(pts, wpts[widx], t)
        det = np.linalg.det(J)
        small = np.flatnonzero(np.abs(det) < tol_det)
        if len(small):
            raise VfckitError("NOT_TRANSVERSAL", f"|det| = {abs(det[small[0]]):.3g} at a zero", witness={"y": pts[small[0]], "w": wpts[widx[small[0]]]})
        signs = np.sign(det) * orientation
    else:
        signs = np.full(len(pts), float(orientation))
    return PointSet(widx, pts, signs)


# -- curves ------------------------------------------------------------------------


@dataclass
class TracedCurve:
    """Polyline on a one-dimensional zero set, ordered along the orientation."""

    nodes: np.ndarray
    closed: bool
    start: tuple = ("closed", None)
    end: tuple = ("closed", None)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.nodes, axis=0), axis=1).sum())


def _solve_square(F: Callable, J: Callable, y0: np.ndarray, tol: float, maxit: int = 40) -> tuple:
    y = np.array(y0, dtype=float)
    for _ in range(maxit):
        f = F(y)
        if not np.all(np.isfinite(f)):
            return y, False
        if np.max(np.abs(f)) < tol:
            return y, True
        try:
            y = y - np.linalg.solve(J(y), f)
        except np.linalg.LinAlgError:
            return y, False
    return y, bool(np.max(np.abs(F(y))) < tol)


class _Tracer:
    def __init__(self, system: MapExpr, dom: Domain, t: float, w, h: float, tol: float, max_steps: int):
        self.system, self.dom, self.t, self.h, self.tol, self.max_steps = system, dom, t, h, tol, max_steps
        self.w = None if w is None or not len(np.atleast_1d(w)) else np.asarray(w, dtype=float)
        self.jac = system.jacobian("y")

    def F(self, y):
        return self.system.at(y, self.w, self.t)

    def J(self, y):
        return self.jac.at(y, self.w, self.t)

    def tangent(self, y):
        T = oriented_tangent(self.J(y))
        nrm = np.linalg.norm(T)
        if nrm < TOL["rank"]:
            raise VfckitError("NOT_TRANSVERSAL", "degenerate tangent while tracing", witness=y)
        return T / nrm

    def correct(self, pred, T):
        F = lambda z: np.concatenate([self.F(z), [T @ (z - pred)]])
        J = lambda z: np.vstack([self.J(z), T[None, :]])
        return _solve_square(F, J, pred, TOL["corrector"])

    def exit_point(self, y, z):
        """Point where the curve leaves the domain between y (inside) and z (outside)."""
        dom = self.dom
        if isinstance(dom, Box):
            best, face = 2.0, None
            for i in range(dom.dim):
                for side, bound in (("lower", dom.lower[i]), ("upper", dom.upper[i])):
                    out = z[i] < bound if side == "lower" else z[i] > bound
                    if out and y[i] != z[i]:
                        frac = (y[i] - bound) / (y[i] - z[i])
                        if frac < best:
                            best, face = frac, (i, side, bound)
            i, side, bound = face
            F = lambda x: np.concatenate([self.F(x), [x[i] - bound]])
            J = lambda x: np.vstack([self.J(x), np.eye(len(x))[i][None, :]])
            x, ok = _solve_square(F, J, y + best * (z - y), TOL["corrector"])
            closed = dom.closed_lower[i] if side == "lower" else dom.closed_upper[i]
            kind = "face" if closed else "open"
            return x, ok, (kind, face)
        c, R = np.asarray(dom.center, dtype=float), float(dom.radius)
        F = lambda x: np.concatenate([self.F(x), [np.dot(x - c, x - c) - R * R]])
        J = lambda x: np.vstack([self.J(x), 2 * (x - c)[None, :]])
        x, ok = _solve_square(F, J, 0.5 * (y + z), TOL["corrector"])
        return x, ok, ("open", None)

    def march(self, y0, sgn):
        nodes = [y0]
        y, hh = y0, self.h
        for k in range(self.max_steps):
            T = sgn * self.tangent(y)
            z, ok = self.correct(y + hh * T, T)
            if not ok or np.linalg.norm(z - y) > 2 * hh:
                hh *= 0.5
                if hh < 1e-7:
                    raise VfckitError("TRACE_BREAK", "corrector failed while tracing", witness={"endpoint": y})
                continue
            if not self.dom.contains(z)[0]:
                x, ok, end = self.exit_point(y, z)
                if not ok:
                    raise VfckitError("TRACE_BREAK", "could not land on the domain boundary", witness={"endpoint": y})
                nodes.append(x)
                return nodes, end
            if len(nodes) > 3:
                seg = z - y
                s = np.clip(np.dot(y0 - y, seg) / max(np.dot(seg, seg), 1e-300), 0.0, 1.0)
                if np.linalg.norm(y + s * seg - y0) < 0.5 * self.h and np.dot(y0 - y, T) > 0:
                    nodes.append(y0)
                    return nodes, ("closed", None)
            nodes.append(z)
            y = z
            hh = min(self.h, 2 * hh)
        raise VfckitError("TRACE_BREAK", "step budget exhausted while tracing", witness={"endpoint": y})


def trace_curves(system: MapExpr, dom: Domain, t: float, w=None, h: float = H_TRACE, per_dim: int = 16, max_steps: int = 200000) -> list:
    """All components of a one-dimensional zero set meeting the seed grid."""
    n = system.ydim
    if system.dim != n - 1:
        raise VfckitError("TYPE_ERROR", f"{system.dim} equations in {n} unknowns do not cut out a curve")
    tr = _Tracer(system, dom, t, w, h, TOL["corrector"], max_steps)
    seeds = dom.samples(per_dim)
    wv = tr.w
    jac = system.jacobian("y")
    pts, ok = project_to_zeros(lambda y: system(y, wv, t), lambda y: jac(y, wv, t), seeds)
    pts = pts[ok]
    pts = sorted_rows(pts[dom.contains(pts)]) if len(pts) else pts
    curves = []
    while len(pts):
        y0 = pts[0]
        fwd, end = tr.march(y0, 1.0)
        if end[0] == "closed":
            curve = TracedCurve(np.array(fwd), True)
        else:
            bwd, start = tr.march(y0, -1.0)
            curve = TracedCurve(np.array(bwd[::-1] + fwd[1:]), False, start, end)
        curves.append(curve)
        d, _ = cKDTree(curve.nodes).query(pts)
        pts = pts[d > 1.5 * h]
    return curves


def _panels(nodes: np.ndarray, panel: float) -> list:
    """Index ranges of panels of about ``panel`` arclength, each a graph over its chord."""
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    m = max(1, int(np.ceil(s[-1] / panel)))
    cuts = sorted({0, len(nodes) - 1} | {int(np.searchsorted(s, s[-1] * k / m)) for k in range(1, m)})
    out = []
    stack = [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a][::-1]
    while stack:
        a, b = stack.pop()
        u = nodes[b] - nodes[a]
        L = np.linalg.norm(u)
        d = np.diff(nodes[a:b + 1], axis=0)
        dn = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        if b - a > 1 and (L < 1e-14 or np.min(dn @ (u / max(L, 1e-300))) < 0.5):
            mid = (a + b) // 2
            stack += [(mid, b), (a, mid)]
            continue
        out.append((a, b))
    return out


def curve_integral(curve: TracedCurve, system: MapExpr, t: float, w, integrand: Callable, q: int = GL_ORDER, panel: float = PANEL) -> float:
    """Integral of a 1-form along the oriented curve.

    ``integrand(pts)`` returns the (N, n) coefficient rows of the 1-form
    (already multiplied by any weight).  On each panel the curve is
    parametrized by the chord coordinate and evaluated exactly by Newton
    correction; the velocity comes from the implicit function theorem.
    """
    nodes = curve.nodes
    wv = None if w is None or not len(np.atleast_1d(w)) else np.asarray(w, dtype=float)
    x, gw = gauss_legendre(q)
    tau, gw = 0.5 * (x + 1.0), 0.5 * gw
    jac = system.jacobian("y")
    A, U, TL, G = [], [], [], []
    for a, b in _panels(nodes, panel):
        pa, pb = nodes[a], nodes[b]
        L = float(np.linalg.norm(pb - pa))
        if L == 0.0:
            continue
        u = (pb - pa) / L
        proj = (nodes[a:b + 1] - pa) @ u
        guess = np.stack([np.interp(tau * L, proj, nodes[a:b + 1, j]) for j in range(nodes.shape[1])], axis=1)
        A.append(np.repeat(pa[None, :], q, 0))
        U.append(np.repeat(u[None, :], q, 0))
        TL.append(tau * L)
        G.append(guess)
    if not G:
        return 0.0
    A, U, TL, z = np.vstack(A), np.vstack(U), np.concatenate(TL), np.vstack(G)
    for _ in range(30):
        F = np.hstack([system(z, wv, t), (np.einsum("ij,ij->i", z - A, U) - TL)[:, None]])
        if np.max(np.abs(F)) < 1e-14:
            break
        J = np.concatenate([jac(z, wv, t), U[:, None, :]], axis=1)
        z = z - np.linalg.solve(J, F[..., None])[..., 0]
    J = np.concatenate([jac(z, wv, t), U[:, None, :]], axis=1)
    rhs = np.zeros((len(z), z.shape[1]))
    rhs[:, -1] = 1.0
    vel = np.linalg.solve(J, rhs[..., None])[..., 0]
    L_rows = TL / np.tile(tau, len(TL) // q)
    vals = np.einsum("ij,ij->i", integrand(z), vel) * L_rows
    return float(np.dot(vals, np.tile(gw, len(TL) // q)))


# -- integration on zero sets ------------------------------------------------------


@dataclass
class ZeroSetGeometry:
    """Numerical model of the perturbed zero set over the parameter nodes."""

    dimension: int
    chart: str
    wpts: np.ndarray
    wweights: np.ndarray
    points: Optional[PointSet] = None
    curves: list = field(default_factory=list)  # per parameter node: list of TracedCurve


def zero_set_geometry(chart: KuranishiChart, cfp: CFPerturbation, eps: float, f: Optional[MapExpr] = None, level: Optional[float] = None, qw: int = W_ORDER, grid: int = GRID, domain: Optional[Domain] = None, h: float = H_TRACE) -> ZeroSetGeometry:
    system = fiber_system(cfp.s, f, level)
    dom = domain or chart.domain
    wpts, wwts = cfp.w_rule(qw)
    d = chart.dim - system.dim
    geo = ZeroSetGeometry(d, chart.label, wpts, wwts)
    if d == 0:
        geo.points = zero_points(system, dom, eps, wpts, grid, chart.orientation)
    elif d == 1:
        geo.curves = [trace_curves(system, dom, eps, w, h, max(grid, 16)) for w in wpts]
    elif d != chart.dim:
        raise VfckitError("MODE_UNSUPPORTED", f"zero sets of dimension {d} are not supported")
    return geo


def integrate_on_perturbed_zero_set(
    chart: KuranishiChart,
    cfp: CFPerturbation,
    eps: float,
    form: DifferentialForm,
    weight: Optional[Callable] = None,
    f: Optional[MapExpr] = None,
    level: Optional[float] = None,
    q: int = GL_ORDER,
    qw: int = W_ORDER,
    grid: int = GRID,
    domain: Optional[Domain] = None,
    support: Optional[Domain] = None,
    panel: float = PANEL,
    geometry: Optional[ZeroSetGeometry] = None,
) -> float:
    """omega-weighted integral of ``form`` over the zero set (or one fiber of it), divided by #Gamma."""
    system = fiber_system(cfp.s, f, level)
    d = chart.dim - system.dim
    if form.degree != d:
        raise VfckitError("TYPE_ERROR", f"form of degree {form.degree} on a zero set of dimension {d}")
    if form.is_zero():
        return 0.0
    dom = domain or chart.domain
    wfun = weight if weight is not None else (lambda p: np.ones(len(p)))
    order = chart.group.order
    if d == chart.dim:
        pts, wts = dom.quadrature(max(q, 2))
        vals = form.dense(pts)[:, 0] * wfun(pts)
        return chart.orientation * float(np.dot(vals, wts)) / order
    geo = geometry or zero_set_geometry(chart, cfp, eps, f, level, qw, grid, dom)
    if d == 0:
        ps = geo.points
        if not len(ps.points):
            return 0.0
        vals = form.dense(ps.points)[:, 0] * wfun(ps.points) * ps.signs * geo.wweights[ps.widx]
        return float(vals.sum()) / order
    total = 0.0
    for w, wt, curves in zip(geo.wpts, geo.wweights, geo.curves):
        for c in curves:
            _check_ends(c, chart, support, wfun, form)
            total += wt * curve_integral(c, system, eps, w, lambda p: form.dense(p) * wfun(p)[:, None], q, panel)
    return chart.orientation * total / order


def _check_ends(curve: TracedCurve, chart: KuranishiChart, support: Optional[Domain], wfun: Callable, form: DifferentialForm) -> None:
    """An open end is fine for a bare manifold chart or where the integrand vanishes."""
    for (kind, _), p in ((curve.start, curve.nodes[0]), (curve.end, curve.nodes[-1])):
        if kind != "open" or chart.rank == 0:
            continue
        if support is not None and not support.contains(p)[0]:
            continue
        if float(np.max(np.abs(form.dense(p[None, :]) * wfun(p[None, :])[:, None]))) < 1e-12:
            continue
        raise VfckitError("TRACE_BREAK", "zero set leaves the chart where the integrand is nonzero", witness={"endpoint": p})


def boundary_sum(chart: KuranishiChart, cfp: CFPerturbation, eps: float, h: DifferentialForm, qw: int = W_ORDER, grid: int = 16) -> float:
    """omega-weighted signed sum of a 0-form over the zeros on the normalized boundary."""
    if h.degree != 0:
        raise VfckitError("TYPE_ERROR", "boundary sums take 0-forms")
    if not isinstance(chart.domain, Box):
        return 0.0
    wpts, wwts = cfp.w_rule(qw)
    total = 0.0
    bd = normalized_boundary(chart)
    for bc, face in zip(bd.charts, bd.faces):
        system = restrict_to_face(cfp.s, face)
        ps = zero_points(system, bc.domain, eps, wpts, grid, bc.orientation)
        if not len(ps.points):
            continue
        lifted = lift_from_face(ps.points, face)
        vals = h.dense(lifted)[:, 0] * ps.signs * wwts[ps.widx]
        total += float(vals.sum()) / bc.group.order
    return total


def endpoint_sum(chart: KuranishiChart, cfp: CFPerturbation, eps: float, h: DifferentialForm, qw: int = W_ORDER, grid: int = 16, geometry: Optional[ZeroSetGeometry] = None) -> float:
    """Traced-curve oracle: h(end) - h(start) summed over curves ending on closed faces."""
    geo = geometry or zero_set_geometry(chart, cfp, eps, qw=qw, grid=grid)
    if geo.dimension != 1:
        raise VfckitError("TYPE_ERROR", "endpoint sums need one-dimensional zero sets")
    total = 0.0
    for wt, curves in zip(geo.wweights, geo.curves):
        for c in curves:
            if c.closed:
                continue
            for (kind, _), p, s in ((c.start, c.nodes[0], -1.0), (c.end, c.nodes[-1], 1.0)):
                if kind == "face":
                    total += wt * s * float(h.dense(p[None, :])[0, 0])
    return chart.orientation * total / chart.group.order


# -- forms on pieces ---------------------------------------------------------------


def form_on_chart(form: DifferentialForm, chart: KuranishiChart, form_chart: Optional[str] = None) -> DifferentialForm:
    """A chart form as is, or a global-coordinate form pulled back by the chart's gc."""
    if form_chart is not None:
        if form_chart != chart.label:
            raise VfckitError("UNRESOLVED_LABEL", f"form lives on chart {form_chart}, not {chart.label}")
        return form
    if form.dim != chart.gc.dim:
        raise VfckitError("TYPE_ERROR", f"global form of dimension {form.dim}, chart {chart.label} maps to R^{chart.gc.dim}")
    return form.pullback(chart.gc)


class _NearImage:
    """Points of a target chart within ``radius`` of the image of a coordinate change."""

    dim = 0

    def __init__(self, phi: MapExpr, pi: MapExpr, src_dom: Domain, radius: float):
        self.phi, self.pi, self.src_dom, self.radius = phi, pi, src_dom, radius

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(pts)
        back = self.pi(pts)
        ok = self.src_dom.contains(back)
        ok &= np.linalg.norm(self.phi(back) - pts, axis=1) < self.radius
        return ok


def gcs_partition(gcs: GoodCoordinateSystem, support: str = "K", margin: float = 0.1, radius: float = 0.05) -> PartitionOfUnity:
    """Partition of unity over the pieces; reverse transfers go through the extension projections."""
    transfers = {}
    for c in gcs.changes:
        transfers[(c.src, c.dst)] = (c.phi, c.domain or gcs.charts[c.src].domain)
        datum = gcs.extension_data.get((c.src, c.dst))
        if datum is not None:
            transfers[(c.dst, c.src)] = (datum.pi, _NearImage(c.phi, datum.pi, gcs.charts[c.src].domain, radius))
    return partition_of_unity(gcs.charts, gcs.support(support), transfers, margin=margin)


# -- pushout -----------------------------------------------------------------------


def output_degree(h_degree: int, dim_M: int, vdim: int) -> int:
    """deg f_!(h) = deg h + dim M - vdim."""
    return h_degree + dim_M - vdim


def pushout(
    gcs: GoodCoordinateSystem,
    cfps: CFSystem,
    forms: dict,
    eps: float,
    mode: str = "point",
    f: Optional[dict] = None,
    rho: Optional[DifferentialForm] = None,
    samples: Optional[Sequence[float]] = None,
    pou: Optional[PartitionOfUnity] = None,
    q: int = GL_ORDER,
    qw: int = W_ORDER,
    grid: int = GRID,
):
    """f_!(h; S^eps) to a point, paired with rho, or sampled at points of M (dim M <= 1).

    ``forms[piece]`` and ``f[piece]`` are given in the coordinates of each piece.
    """
    pieces = gcs.pieces()
    if pou is None and len(pieces) > 1:
        pou = gcs_partition(gcs)
    weight = {p: (None if pou is None else (lambda pts, p=p: pou.chi(p, pts))) for p in pieces}
    sup = gcs.support("K")
    if mode == "point":
        return sum(integrate_on_perturbed_zero_set(gcs.charts[p], cfps[p], eps, forms[p], weight[p], q=q, qw=qw, grid=grid, support=sup[p]) for p in pieces)
    if f is None:
        raise VfckitError("TYPE_ERROR", f"mode {mode} needs a map to M")
    dimM = next(iter(f.values())).dim
    if mode not in ("pair", "grid"):
        raise VfckitError("MODE_UNSUPPORTED", f"unknown pushout mode {mode!r}")
    if mode == "grid" and dimM != 1:
        raise VfckitError("MODE_UNSUPPORTED", f"grid pushout needs dim M = 1, got {dimM}")
    _require_submersive(gcs, cfps, f, eps)
    if mode == "pair":
        if rho is None:
            raise VfckitError("TYPE_ERROR", "pairing mode needs a test form rho")
        return sum(
            integrate_on_perturbed_zero_set(gcs.charts[p], cfps[p], eps, forms[p].wedge(rho.pullback(f[p])), weight[p], q=q, qw=qw, grid=grid, support=sup[p])
            for p in pieces
        )
    out = []
    for c in samples or []:
        out.append(
            sum(
                integrate_on_perturbed_zero_set(gcs.charts[p], cfps[p], eps, forms[p], weight[p], f=f[p], level=c, q=q, qw=qw, grid=grid, support=sup[p])
                for p in pieces
            )
        )
    return out


def _require_submersive(gcs: GoodCoordinateSystem, cfps: CFSystem, f: dict, eps: float, per_dim: int = 10) -> None:
    """f restricted to the perturbed zero set must be a submersion at sampled zeros."""
    for p in gcs.pieces():
        chart, cfp = gcs.charts[p], cfps[p]
        df = f[p].jacobian("y")
        wpts, _ = cfp.w_rule(3)
        for w in wpts:
            wv = w if len(w) else None
            if chart.rank:
                jac = cfp.s.jacobian("y")
                pts, ok = project_to_zeros(lambda y: cfp.s(y, wv, eps), lambda y: jac(y, wv, eps), chart.domain.samples(per_dim))
                pts = pts[ok & chart.domain.contains(pts)]
            else:
                pts = chart.domain.samples(per_dim)
            for y in pts:
                Ds = cfp.s.jacobian("y").at(y, wv, eps) if chart.rank else np.zeros((0, chart.dim))
                _, sv, vt = np.linalg.svd(Ds) if chart.rank else (None, np.zeros(0), np.eye(chart.dim))
                r = int(np.sum(sv > TOL["rank"]))
                N = vt[r:].T
                m = df.at(y) @ N
                smin = np.linalg.svd(m, compute_uv=False).min() if m.size else 0.0
                if smin < TOL["rank"]:
                    raise VfckitError("NOT_SUBMERSIVE", f"f is not submersive on the zero set of {p}", witness={"y": y, "sigma_min": float(smin)})


# -- Stokes ------------------------------------------------------------------------


def stokes_check(gcs: GoodCoordinateSystem, cfps: CFSystem, h: DifferentialForm, eps_list: Sequence[float], q: int = GL_ORDER, q_low: Optional[int] = None, qw: int = W_ORDER, tol: float = 1e-6) -> Report:
    """Compare int_Z dh with the signed boundary sum of h for every eps.

    With ``q_low`` the residual is recomputed at that panel order and the
    residual must fall by at least 10x from q_low to q.
    """
    if gcs.vdim != 1:
        raise VfckitError("COMMAND_SCENARIO_MISMATCH", f"Stokes check needs virtual dimension 1, got {gcs.vdim}")
    pieces = gcs.pieces()
    if len(pieces) != 1:
        raise VfckitError("MODE_UNSUPPORTED", "the Stokes check is implemented for one-piece systems")
    p = pieces[0]
    chart, cfp = gcs.charts[p], cfps[p]
    dh = h.d()
    rep = Report("stokes")
    ladder = []
    for e in eps_list:
        geo = zero_set_geometry(chart, cfp, e, qw=qw, grid=16)
        lhs = integrate_on_perturbed_zero_set(chart, cfp, e, dh, q=q, qw=qw, geometry=geo)
        rhs = boundary_sum(chart, cfp, e, h, qw=qw)
        ends = endpoint_sum(chart, cfp, e, h, qw=qw, geometry=geo)
        res = abs(lhs - rhs)
        row = {"epsilon": e, "lhs": lhs, "rhs": rhs, "residual": res, "order": q}
        rep.add(Check.from_residual(f"stokes_residual[eps={e:g}]", res, tol))
        rep.add(Check.from_residual(f"endpoint_match[eps={e:g}]", abs(ends - rhs), TOL["struct"]))
        if q_low:
            low = abs(integrate_on_perturbed_zero_set(chart, cfp, e, dh, q=q_low, qw=qw, geometry=geo) - rhs)
            row["residual_low_order"] = low
            row["low_order"] = q_low
            ok = res * 10.0 <= low
            rep.add(Check(f"order_reduction[eps={e:g}]", PASS if ok else FAIL, low / res if res > 0 else float("inf"), None if ok else {"q_low": low, "q": res}, detail=f"residual ratio q={q_low} to q={q}"))
        ladder.append(row)
    rep.results["ladder"] = ladder
    return rep


# -- correspondences ---------------------------------------------------------------


@dataclass
class Correspondence:
    """A space with source and target maps and a CF-perturbation."""

    label: str
    chart: KuranishiChart
    source: MapExpr
    target: MapExpr
    cfp: CFPerturbation

    @property
    def degree(self) -> int:
        """ell = dim M_t - vdim."""
        return self.target.dim - self.chart.vdim

    def check_submersive(self, per_dim: int = 8) -> Check:
        pts = self.chart.domain.samples(per_dim)
        df = self.target.jacobian("y")(pts)
        sv = np.linalg.svd(df, compute_uv=False)[:, -1] if self.target.dim else np.full(len(pts), np.inf)
        i = int(np.argmin(sv))
        ok = bool(sv[i] > TOL["rank"])
        return Check("target_submersive", PASS if ok else FAIL, float(sv[i]), None if ok else pts[i])


def fiber_points(corr: Correspondence, eps: float, level: float, qw: int = W_ORDER, grid: int = GRID) -> tuple:
    """Signed, omega-weighted points of the fiber of f_t over ``level`` (zero-dimensional fibers)."""
    system = fiber_system(corr.cfp.s, corr.target, level)
    wpts, wwts = corr.cfp.w_rule(qw)
    ps = zero_points(system, corr.chart.domain, eps, wpts, grid, corr.chart.orientation)
    return ps.points, ps.signs * wwts[ps.widx] / corr.chart.group.order


def correspondence_apply(corr: Correspondence, h: DifferentialForm, eps: float, mode: str = "grid", samples: Optional[Sequence[float]] = None, rho: Optional[DifferentialForm] = None, q: int = GL_ORDER, qw: int = W_ORDER):
    """Corr(h) = f_t!(f_s^* h) as samples on M_t (grid), a pairing with rho, or a number (point)."""
    pulled = h.pullback(corr.source)
    chk = corr.check_submersive()
    if chk.status == FAIL:
        raise VfckitError("NOT_SUBMERSIVE", "target map is not submersive", witness=chk.witness)
    if mode == "point" or corr.target.dim == 0:
        return integrate_on_perturbed_zero_set(corr.chart, corr.cfp, eps, pulled, q=q, qw=qw)
    if mode == "pair":
        return integrate_on_perturbed_zero_set(corr.chart, corr.cfp, eps, pulled.wedge(rho.pullback(corr.target)), q=q, qw=qw)
    if mode == "grid":
        if corr.target.dim != 1:
            raise VfckitError("MODE_UNSUPPORTED", "grid mode needs a one-dimensional target")
        return [integrate_on_perturbed_zero_set(corr.chart, corr.cfp, eps, pulled, f=corr.target, level=c, q=q, qw=qw) for c in samples or []]
    raise VfckitError("MODE_UNSUPPORTED", f"unknown mode {mode!r}")


def compose_correspondences(c21: Correspondence, c32: Correspondence) -> Correspondence:
    """Fiber product over M_2 when the second correspondence is the identity of M_2.

    Then N_21 x_{M_2} N_32 is N_21 itself with target f_t32 o f_t21.
    """
    ident = c32.chart.rank == 0 and c32.chart.group.order == 1 and c32.source.equals(MapExpr.identity(c32.chart.dim))
    if not ident:
        raise VfckitError("MODE_UNSUPPORTED", "composition is implemented for an identity second correspondence")
    return Correspondence(f"{c32.label}o{c21.label}", c21.chart, c21.source, c32.target.compose(c21.target), c21.cfp)


def _interval_rule(chart: KuranishiChart, q: int) -> tuple:
    pts, wts = chart.domain.quadrature(q)
    return pts[:, 0], wts


def kernel_check(corr: Correspondence, k: DifferentialForm, h2: DifferentialForm, eps: float, M: KuranishiChart, q: int = GL_ORDER) -> tuple:
    """Fubini layer: int_N k ^ f^* h2 directly and as int_M f_!(k) ^ h2."""
    direct = integrate_on_perturbed_zero_set(corr.chart, corr.cfp, eps, k.wedge(h2.pullback(corr.target)), q=q)
    xs, wx = _interval_rule(M, q)
    fib = [integrate_on_perturbed_zero_set(corr.chart, corr.cfp, eps, k, f=corr.target, level=x, q=q) for x in xs]
    coef = h2.dense(xs[:, None])[:, 0]
    return direct, float(np.dot(np.array(fib) * coef, wx))


def composition_pairing(c21: Correspondence, c32: Correspondence, h: DifferentialForm, rho: DifferentialForm, eps: float, M3: KuranishiChart, q: int = GL_ORDER) -> tuple:
    """Corr_{32 o 21}(h) and Corr_32(Corr_21(h)), each paired with rho on M_3."""
    comp = compose_correspondences(c21, c32)
    direct = correspondence_apply(comp, h, eps, "pair", rho=rho, q=q)
    zs, wz = _interval_rule(M3, q)
    outer = []
    for z in zs:
        pts, wts = fiber_points(c32, eps, z)
        xs = c32.source(pts)[:, 0] if len(pts) else np.zeros(0)
        inner = correspondence_apply(c21, h, eps, "grid", samples=list(xs), q=q) if len(xs) else []
        outer.append(float(np.dot(wts, inner)) if len(xs) else 0.0)
    coef = rho.dense(zs[:, None])[:, 0]
    return direct, float(np.dot(np.array(outer) * coef, wz))


def projection_formula_check(corr: Correspondence, h: DifferentialForm, g: sp.Expr, eps: float, samples: Sequence[float], q: int = GL_ORDER) -> float:
    """max |f_!(h ^ f^* g) - f_!(h) g| over samples, g a function on M."""
    g = coerce_expr(g)
    gform = DifferentialForm.function(corr.target.dim, g)
    lhs = correspondence_apply(Correspondence(corr.label, corr.chart, MapExpr.identity(corr.chart.dim), corr.target, corr.cfp), h.wedge(gform.pullback(corr.target)), eps, "grid", samples, q=q)
    base = correspondence_apply(Correspondence(corr.label, corr.chart, MapExpr.identity(corr.chart.dim), corr.target, corr.cfp), h, eps, "grid", samples, q=q)
    gv = gform.dense(np.array(samples, dtype=float)[:, None])[:, 0]
    return float(np.max(np.abs(np.array(lhs) - np.array(base) * gv)))
