"""Multisections, multivalued perturbations and CF-perturbations."""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from scipy.optimize import linear_sum_assignment

from .bundle import BundleExtensionDatum
from .errors import VfckitError
from .expr import MapExpr, MatrixExpr, T, W, Y, step, to_text, wsyms, ysyms
from .gcs import GoodCoordinateSystem
from .kuranishi import KuranishiChart, boundary_chart, check_transversal_maps
from .numerics import cluster, newton, project_to_zeros
from .orbifold import Ball, Box, Domain
from .report import FAIL, MAX_RETRY, PASS, TOL, Check, Report

# -- multisections ---------------------------------------------------------------


@dataclass(frozen=True)
class Multisection:
    """An l-multisection on one chart: branches are expressions in y and t."""

    chart: str
    branches: tuple

    @property
    def ell(self) -> int:
        return len(self.branches)

    def values(self, pts, t: float = 0.0) -> np.ndarray:
        """(ell, N, k) array of branch values."""
        pts = np.atleast_2d(pts)
        return np.stack([b(pts, t=t) for b in self.branches])

    def texts(self) -> list:
        return [b.texts() for b in self.branches]

    def iterate(self, times: int) -> "Multisection":
        return Multisection(self.chart, tuple(b for b in self.branches for _ in range(times)))

    def restrict_face(self, chart: KuranishiChart, face) -> "Multisection":
        """Branches restricted to a closed face (coordinates renumbered)."""
        i, _, value = face
        n = chart.dim
        keep = [j for j in range(n) if j != i]
        sub = {Y(i + 1): sp.nsimplify(value, rational=True)}
        for new, old in enumerate(keep):
            sub[Y(old + 1)] = Y(new + 1)
        out = []
        for b in self.branches:
            out.append(MapExpr(tuple(sp.sympify(e).subs(sub, simultaneous=True) for e in b.exprs), n - 1, b.wdim))
        return Multisection(f"{self.chart}@{face[1]}{i + 1}", tuple(out))


def _find_permutation(lhs: np.ndarray, rhs: np.ndarray, tol: float) -> Optional[tuple]:
    """sigma with lhs[sigma(k)] == rhs[k] for all k (lhs, rhs: (ell, k))."""
    ell = len(lhs)
    cost = np.linalg.norm(lhs[:, None, :] - rhs[None, :, :], axis=2)  # cost[a, k]
    if ell <= 6:
        for perm in itertools.permutations(range(ell)):
            if all(cost[perm[k], k] <= tol for k in range(ell)):
                return perm
        return None
    rows, cols = linear_sum_assignment(cost.T)
    perm = tuple(int(c) for c in cols)
    if all(cost[perm[k], k] <= tol for k in range(ell)):
        return perm
    return None


def verify_multisection(ms: Multisection, chart: KuranishiChart, per_dim: int = 8, ts: Sequence[float] = (0.1, 0.01), tol_eq: float = TOL["eq"]) -> Report:
    """Equivariance up to a point-dependent permutation of the branches."""
    rep = Report("verify_multisection")
    pts = chart.domain.samples(per_dim)
    base = np.array(chart.base.base_point)
    extra = np.array([base + 0.5 * e for e in np.eye(chart.dim)] + [base + 1.0 * e for e in np.eye(chart.dim)])
    pts = np.vstack([extra[chart.domain.contains(extra)], pts])
    perms = {}
    witness = None
    for t in ts:
        vals = ms.values(pts, t)
        for k, e in enumerate(chart.group.elements):
            moved = ms.values(pts @ e.T, t)
            rho = chart.bundle.rho(k)
            for i in range(len(pts)):
                rhs = vals[:, i, :] @ rho.T
                perm = _find_permutation(moved[:, i, :], rhs, tol_eq * (1 + np.abs(rhs).max(initial=0.0)))
                if perm is None:
                    witness = {"point": pts[i], "element": k, "t": t}
                    break
                perms.setdefault(k, perm)
            if witness:
                break
        if witness:
            break
    rep.add(Check("equivariance_up_to_permutation", PASS if witness is None else FAIL, witness=witness, detail="" if witness is None else "NO_PERMUTATION_FOUND"))
    rep.results["permutations"] = {int(k): list(v) for k, v in perms.items()}
    rep.results["ell"] = ms.ell
    return rep


def branches_at(ms: Multisection, point, t: float = 0.0) -> list:
    """Branch germs at a point: (branch expression, value) pairs."""
    vals = ms.values(np.atleast_2d(point), t)[:, 0, :]
    return [(b, v) for b, v in zip(ms.branches, vals)]


def equivalent(a: Multisection, b: Multisection, pts: np.ndarray, t: float = 0.0, tol: float = 1e-9) -> bool:
    """Equal after iteration: the weighted multisets of branch values agree."""
    va, vb = a.values(pts, t), b.values(pts, t)
    la, lb = a.ell, b.ell
    for i in range(len(pts)):
        ea = np.repeat(va[:, i, :], lb, axis=0)
        eb = np.repeat(vb[:, i, :], la, axis=0)
        if _find_permutation(ea, eb, tol) is None:
            return False
    return True


# -- restriction and extension ---------------------------------------------------


def restrict_multisection(ms: Multisection, phi: MapExpr, fiber: MatrixExpr, src_label: str) -> Multisection:
    """Pull branches back along a coordinate change: G(y)^+ s_i(phi(y))."""
    ginv = fiber.left_inverse()
    out = []
    for b in ms.branches:
        pulled = b.compose(phi)
        out.append(MapExpr(tuple(sp.simplify(e) for e in ginv.apply(pulled).exprs), phi.ydim, b.wdim))
    return Multisection(src_label, tuple(out))


def extend_multisection(ms: Multisection, base_section: MapExpr, target_section: MapExpr, datum: Optional[BundleExtensionDatum], dst_label: str) -> Multisection:
    """Extend along bundle extension data: s_2 + F(y) (s_1^i(pi y) - s_1(pi y)).

    On the embedded locus this reproduces the transported branches, and it
    keeps the number of branches.
    """
    if datum is None:
        raise VfckitError("MISSING_EXTENSION_DATA", f"no bundle extension datum for {ms.chart} -> {dst_label}")
    out = []
    n2 = datum.pi.ydim
    for b in ms.branches:
        diff = (b - base_section).compose(datum.pi)
        moved = datum.fiber.apply(diff)
        out.append(MapExpr(tuple(sp.expand(a + c) if (a + c).is_polynomial() else a + c for a, c in zip(target_section.exprs, moved.exprs)), n2, b.wdim))
    return Multisection(dst_label, tuple(out))


def restrict_and_transfer(obj: Multisection, change=None, datum: Optional[BundleExtensionDatum] = None, charts: Optional[dict] = None, direction: str = "extend"):
    """Restrict along a coordinate change, or extend along extension data."""
    if direction == "restrict":
        return restrict_multisection(obj, change.phi, change.fiber, change.src)
    if datum is None:
        raise VfckitError("MISSING_EXTENSION_DATA", "extension requested without a bundle extension datum")
    src, dst = charts[datum.src], charts[datum.dst]
    return extend_multisection(obj, src.s, dst.s, datum, datum.dst)


# -- transversality ---------------------------------------------------------------


@dataclass
class TransversalityReport:
    region: str
    sigma_min: float
    sigma_min_region: float
    transversal: bool
    strongly_submersive: Optional[bool] = None
    sigma_submersive: Optional[float] = None
    c_estimate: Optional[float] = None
    zeros: int = 0
    witness: object = None
    resolution: int = 0

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _zeros_of(section: MapExpr, chart_dim: int, dom: Domain, per_dim: int, t: float, w=None, region: Optional[Callable] = None) -> np.ndarray:
    seeds = dom.samples(per_dim)
    if region is not None:
        seeds = seeds[region(seeds)]
    if section.dim == 0:
        return seeds
    jac = section.jacobian("y")
    F = lambda y: section(y, w, t)
    J = lambda y: jac(y, w, t)
    if section.dim == chart_dim:
        pts, ok = newton(F, J, seeds)
    else:
        pts, ok = project_to_zeros(F, J, seeds)
    pts = pts[ok]
    pts = pts[dom.contains(pts)]
    if region is not None and len(pts):
        pts = pts[region(pts)]
    if len(pts) and section.dim == chart_dim:
        lab = cluster(pts, 1e-8)
        pts = np.array([pts[lab == k][0] for k in range(lab.max() + 1)])
    return pts


def _polish(F: Callable, J: Callable, zs: np.ndarray, steps: int = 24) -> np.ndarray:
    """Extra pseudo-inverse Newton steps on converged zeros.

    Simple zeros do not move, while at a degenerate zero the iterates keep
    approaching it and the sampled smallest singular value goes to zero.
    """
    y = np.array(zs, dtype=float, copy=True)
    for _ in range(steps):
        with np.errstate(all="ignore"):
            step = np.einsum("nij,nj->ni", np.linalg.pinv(J(y)), F(y))
        if not np.all(np.isfinite(step)):
            break
        y = y - step
    return y


def _sigma(mat: np.ndarray) -> np.ndarray:
    if mat.shape[-2] == 0:
        return np.full(mat.shape[0], np.inf)
    return np.linalg.svd(mat, compute_uv=False)[..., -1] if mat.shape[-2] <= mat.shape[-1] else np.zeros(mat.shape[0])


def check_transversality(
    branches: Sequence[MapExpr],
    chart: KuranishiChart,
    t: float = 0.0,
    region: Optional[Callable] = None,
    domain: Optional[Domain] = None,
    f: Optional[MapExpr] = None,
    per_dim: int = 16,
    w=None,
    tol_rank: float = TOL["rank"],
    region_name: str = "domain",
) -> TransversalityReport:
    """SVD-based transversality of each branch at its sampled zeros.

    ``region`` is an optional predicate on chart points restricting where
    transversality is required; ``f`` adds the strong submersivity test.
    """
    dom = domain or chart.domain
    smin, sreg, wit, nz = np.inf, np.inf, None, 0
    ssub = np.inf if f is not None else None
    samples = dom.samples(per_dim)
    if region is not None:
        samples = samples[region(samples)]
    for b in branches:
        jac = b.jacobian("y")
        if len(samples) and b.dim:
            sreg = min(sreg, float(_sigma(jac(samples, w, t)).min()))
        zs = _zeros_of(b, chart.dim, dom, per_dim, t, w, region)
        nz += len(zs)
        if not len(zs) or not b.dim:
            if f is not None and len(zs):
                df = f.jacobian("y")(zs)
                ssub = min(ssub, float(_sigma(df).min()))
            continue
        zs = _polish(lambda y: b(y, w, t), lambda y: jac(y, w, t), zs)
        J = jac(zs, w, t)
        sv = _sigma(J)
        i = int(np.argmin(sv))
        if sv[i] < smin:
            smin, wit = float(sv[i]), zs[i]
        if f is not None:
            df = f.jacobian("y")(zs)
            for k in range(len(zs)):
                _, s_, vt = np.linalg.svd(J[k])
                r = int(np.sum(s_ > tol_rank))
                N = vt[r:].T
                ssub = min(ssub, float(_sigma((df[k] @ N)[None])[0]) if N.shape[1] else 0.0)
    c_est = _normal_constant(chart, dom, per_dim, region)
    if smin == np.inf and nz and all(b.dim == 0 for b in branches):
        smin = np.inf
    transversal = bool(smin > tol_rank)
    return TransversalityReport(
        region_name,
        smin,
        sreg,
        transversal,
        None if f is None else bool(ssub > tol_rank),
        ssub,
        c_est,
        nz,
        None if transversal else wit,
        per_dim,
    )


def _normal_constant(chart: KuranishiChart, dom: Domain, per_dim: int, region) -> Optional[float]:
    """Sampled estimate of c in |s(y)| >= c d(y, s^{-1}(0))."""
    if chart.rank == 0:
        return None
    pts = dom.samples(per_dim)
    if region is not None:
        pts = pts[region(pts)]
    if not len(pts):
        return None
    proj, ok = project_to_zeros(chart.s, chart.ds, pts)
    d = np.linalg.norm(proj - pts, axis=1)
    keep = ok & (d > 1e-6)
    if not keep.any():
        return None
    return float(np.min(np.linalg.norm(chart.s(pts[keep]), axis=1) / d[keep]))


# -- multivalued perturbations ---------------------------------------------------


@dataclass
class MultivaluedPerturbation:
    """Per-piece multisections with t standing for 1/n."""

    sections: dict
    seed: int = 0
    xi: dict = field(default_factory=dict)
    attempts: dict = field(default_factory=dict)

    def at(self, piece: str) -> Multisection:
        return self.sections[piece]

    def serialize(self) -> str:
        """Scenario-format multisection blocks (replayable)."""
        lines = []
        for lab in sorted(self.sections):
            ms = self.sections[lab]
            lines.append(f"[multisection {lab}]")
            lines.append(f"chart = {lab}")
            rows = ", ".join("[" + ", ".join(b.texts()) + "]" for b in ms.branches)
            lines.append(f"branches = [{rows}]")
            lines.append("")
        return "\n".join(lines)


def label_hash(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def draw_xi(rng: np.random.Generator, rep: list, k: int, sep: float = 0.25) -> np.ndarray:
    """Dyadic point of the unit box whose orbit under the fiber action is free."""
    eye = np.eye(k)
    for _ in range(1000):
        xi = np.round(rng.uniform(-1, 1, size=k) * 256) / 256
        if np.linalg.norm(xi) < sep:
            continue
        if all(np.allclose(r, eye) or np.linalg.norm(r @ xi - xi) >= sep for r in rep):
            return xi
    raise VfckitError("TRANSVERSALITY_RETRY_EXHAUSTED", "no free-orbit parameter found")


def _rat(v: float) -> sp.Rational:
    return sp.nsimplify(float(v), rational=True)


def _const_vec(v: np.ndarray) -> list:
    return [_rat(x) for x in v]


def extension_cutoff(datum: BundleExtensionDatum, phi: MapExpr, K_src: Domain, n_dst: int, radius: float, margin: float) -> sp.Expr:
    """Smooth chi_0 on the target chart: 1 near phi(K), 0 away from it."""
    bump = K_src.bump(margin)
    sub = {Y(i + 1): datum.pi.exprs[i] for i in range(datum.pi.dim)}
    along = sp.sympify(bump).subs(sub, simultaneous=True)
    foot = phi.compose(datum.pi)
    dist2 = sum((Y(i + 1) - foot.exprs[i]) ** 2 for i in range(n_dst))
    r2 = _rat(radius) ** 2
    normal = step(2 - 2 * dist2 / r2)
    return along * normal


def _own_term(chart: KuranishiChart, xi: np.ndarray, g: int) -> tuple:
    """-t * rho(g) xi, the branch-g contribution of the chart's own parameter."""
    v = chart.bundle.rho(g) @ xi
    return tuple(-T * _rat(x) for x in v)


def build_multisection(
    gcs: GoodCoordinateSystem,
    piece: str,
    xi: np.ndarray,
    built: dict,
    support: str = "K",
    cutoff_radius: float = 0.25,
) -> Multisection:
    """Branches on one piece: extension of lower pieces plus the own term."""
    chart = gcs.charts[piece]
    n, k = chart.dim, chart.rank
    preds = [c for c in gcs.predecessors(piece) if c.src in built]
    ext_terms, cutoffs = [], []
    for c in preds:
        datum = gcs.extension_data.get((c.src, c.dst))
        if datum is None:
            raise VfckitError("MISSING_EXTENSION_DATA", f"no bundle extension datum for {c.src} -> {c.dst}")
        src = gcs.charts[c.src]
        ext = extend_multisection(built[c.src], src.s, MapExpr((0,) * k, n), datum, piece)
        K = gcs.support(support)[c.src]
        cutoffs.append(extension_cutoff(datum, c.phi, K, n, cutoff_radius, 0.1))
        ext_terms.append(ext.branches)
    chi0 = 1 - sp.Mul(*[1 - c for c in cutoffs]) if cutoffs else sp.Integer(0)
    branches = []
    for combo in itertools.product(*ext_terms) if ext_terms else [()]:
        for g in range(chart.group.order):
            own = _own_term(chart, xi, g)
            exprs = []
            for j in range(k):
                e = chart.s.exprs[j] + (1 - chi0) * own[j]
                for cut, br in zip(cutoffs, combo):
                    e = e + cut * br.exprs[j]
                exprs.append(e)
            branches.append(MapExpr(tuple(exprs), n))
    return Multisection(piece, tuple(branches))


def build_multivalued_perturbation(
    gcs: GoodCoordinateSystem,
    seed: int = 0,
    n_list: Sequence[int] = (10, 100),
    support: str = "K",
    max_retry: int = MAX_RETRY,
    per_dim: int = 12,
    tol_rank: float = TOL["rank"],
) -> MultivaluedPerturbation:
    """Transversal multivalued perturbation built chart by chart (lowest first).

    For each piece a free-orbit parameter xi is drawn from a generator seeded
    by (seed, label, attempt); the attempt is retried until every branch and
    its restriction to every boundary face is transversal at each stage n.
    """
    built, xis, attempts = {}, {}, {}
    for piece in gcs.pieces():
        chart = gcs.charts[piece]
        for attempt in range(max_retry):
            rng = np.random.default_rng([int(seed), label_hash(piece), attempt])
            xi = draw_xi(rng, chart.bundle.representation, chart.rank) if chart.rank else np.zeros(0)
            ms = build_multisection(gcs, piece, xi, built, support)
            if _transversal_everywhere(ms, chart, n_list, per_dim, tol_rank):
                break
        else:
            raise VfckitError("TRANSVERSALITY_RETRY_EXHAUSTED", f"no transversal perturbation on {piece} after {max_retry} attempts")
        built[piece], xis[piece], attempts[piece] = ms, xi, attempt + 1
    return MultivaluedPerturbation(built, seed, xis, attempts)


def _transversal_everywhere(ms: Multisection, chart: KuranishiChart, n_list, per_dim: int, tol_rank: float) -> bool:
    for n in n_list:
        t = 1.0 / n
        if not check_transversality(ms.branches, chart, t, per_dim=per_dim, tol_rank=tol_rank).transversal:
            return False
        if isinstance(chart.domain, Box):
            for face in chart.domain.faces():
                bc = boundary_chart(chart, face)
                rs = ms.restrict_face(chart, face)
                if bc.dim == 0:
                    continue
                if not check_transversality(rs.branches, bc, t, per_dim=per_dim, tol_rank=tol_rank).transversal:
                    return False
    return True


def verify_mvp_compatibility(gcs: GoodCoordinateSystem, mvp: MultivaluedPerturbation, n: int = 100, per_dim: int = 8, support: str = "Kprime", tol: float = 1e-8) -> Report:
    """s_p^n o phi_pq = phi_hat_pq o s_q^n (as branch multisets) near K_q."""
    rep = Report("mvp_compatibility")
    t = 1.0 / n
    worst, wit = 0.0, None
    for c in gcs.changes:
        if c.kind == "open" or c.src not in mvp.sections or c.dst not in mvp.sections:
            continue
        src, dst = gcs.charts[c.src], gcs.charts[c.dst]
        K = gcs.support(support)[c.src]
        pts = K.samples(per_dim)
        pts = pts[c.applies(pts) & src.domain.contains(pts)]
        a = mvp.sections[c.src].values(pts, t)  # (l1, N, k1)
        b = mvp.sections[c.dst].values(c.phi(pts), t)  # (l2, N, k2)
        G = c.fiber(pts)
        moved = np.einsum("nij,lnj->lni", G, a)
        l1, l2 = a.shape[0], b.shape[0]
        for i in range(len(pts)):
            ea = np.repeat(moved[:, i, :], l2, axis=0)
            eb = np.repeat(b[:, i, :], l1, axis=0)
            cost = np.linalg.norm(ea[:, None, :] - eb[None, :, :], axis=2)
            r, cidx = linear_sum_assignment(cost)
            d = float(cost[r, cidx].max(initial=0.0))
            if d > worst:
                worst, wit = d, {"change": c.label, "point": pts[i]}
    rep.add(Check.from_residual("chart_compatibility", worst, tol, wit))
    return rep


def c1_convergence(chart: KuranishiChart, ms: Multisection, n_list: Sequence[int], per_dim: int = 8) -> list:
    """sup |s^n - s| + |Ds^n - Ds| over samples, per n."""
    pts = chart.domain.samples(per_dim)
    s0 = chart.s(pts)
    d0 = chart.ds(pts)
    out = []
    for n in n_list:
        t = 1.0 / n
        gap = 0.0
        for b in ms.branches:
            gap = max(gap, float(np.max(np.abs(b(pts, t=t) - s0), initial=0.0)) + float(np.max(np.abs(b.jacobian("y")(pts, t=t) - d0), initial=0.0)))
        out.append(gap)
    return out


# -- CF-perturbations ------------------------------------------------------------


def omega_density(dom: Domain, power: int = 4) -> sp.Expr:
    """Normalized polynomial bump (1 - u^2)^power on the parameter domain."""
    p = int(power)
    u = sp.Symbol("u")
    if isinstance(dom, Ball):
        R = _rat(dom.radius)
        r2 = sum((wsyms(dom.dim)[i] - _rat(c)) ** 2 for i, c in enumerate(dom.center))
        if dom.dim == 1:
            mass = sp.integrate((1 - u ** 2) ** p, (u, -1, 1)) * R
        elif dom.dim == 2:
            rr = sp.Symbol("rr")
            mass = sp.integrate((1 - rr ** 2) ** p * rr, (rr, 0, 1)) * 2 * sp.pi * R ** 2
        else:
            raise VfckitError("MODE_UNSUPPORTED", "ball parameter domains are limited to dimension 2")
        return (1 - r2 / R ** 2) ** p / mass
    out = sp.Integer(1)
    base = sp.integrate((1 - u ** 2) ** p, (u, -1, 1))
    for i in range(dom.dim):
        a, b = _rat(dom.lower[i]), _rat(dom.upper[i])
        mid, half = (a + b) / 2, (b - a) / 2
        out *= (1 - ((W_sym(i) - mid) / half) ** 2) ** p / (base * half)
    return out


@dataclass
class CFPerturbation:
    """(W, omega, s^eps) on one chart; s is an expression in y, w and t = eps."""

    chart: str
    W: Domain
    action: list  # one matrix per chart group element acting on W
    omega: sp.Expr
    s: MapExpr

    @property
    def wdim(self) -> int:
        return self.W.dim

    def omega_values(self, wpts) -> np.ndarray:
        from .expr import evaluate

        wpts = np.atleast_2d(wpts)
        if self.wdim == 0:
            return np.ones(len(wpts))
        return evaluate([self.omega], wsyms(self.wdim) + (T,), np.hstack([wpts, np.zeros((len(wpts), 1))]))[:, 0]

    def w_rule(self, q: int = 16) -> tuple:
        """Quadrature nodes on W with weights already multiplied by omega."""
        if self.wdim == 0:
            return np.zeros((1, 0)), np.ones(1)
        pts, wts = self.W.quadrature(q)
        return pts, wts * self.omega_values(pts)

    def serialize(self) -> str:
        lines = [f"[cfp {self.chart}]", f"chart = {self.chart}"]
        if isinstance(self.W, Ball):
            lines += [f"W.center = {list(self.W.center)}", f"W.radius = {self.W.radius}"]
        else:
            lines += [f"W.lower = {list(self.W.lower)}", f"W.upper = {list(self.W.upper)}"]
        lines.append("omega = " + to_text(self.omega))
        lines.append("section = [" + ", ".join(self.s.texts()) + "]")
        return "\n".join(lines) + "\n"


def box_or_ball_W(chart: KuranishiChart, k: int) -> Domain:
    """Parameter domain invariant under the fiber representation."""
    if k == 0:
        return Box((), ())
    reps = chart.bundle.representation
    if all(np.allclose(np.abs(r), np.round(np.abs(r))) and np.allclose(np.abs(r).sum(axis=0), 1) for r in reps):
        return Box((-1.0,) * k, (1.0,) * k)
    return Ball((0.0,) * k, 1.0)


def standard_cfp(chart: KuranishiChart, power: int = 4) -> CFPerturbation:
    """s^eps(y, w) = s(y) - eps * w with W a unit box (or disk), acted on by rho."""
    k = chart.rank
    if k == 0:
        return empty_cfp(chart)
    W = box_or_ball_W(chart, k)
    exprs = tuple(chart.s.exprs[j] - T * W_sym(j) for j in range(k))
    return CFPerturbation(chart.label, W, list(chart.bundle.representation), omega_density(W, power), MapExpr(exprs, chart.dim, k))


def W_sym(j: int) -> sp.Symbol:
    return W(j + 1)


def empty_cfp(chart: KuranishiChart) -> CFPerturbation:
    """The trivial CF-perturbation of a chart with zero obstruction space."""
    return CFPerturbation(chart.label, _PointW(), [np.zeros((0, 0))] * chart.group.order, sp.Integer(1), MapExpr(tuple(chart.s.exprs), chart.dim, 0))


class _PointW:
    """Zero-dimensional parameter space."""

    dim = 0
    kind = "point"
    lower: tuple = ()
    upper: tuple = ()

    def quadrature(self, q):
        return np.zeros((1, 0)), np.ones(1)

    def samples(self, per_dim=1):
        return np.zeros((1, 0))

    def contains(self, pts, margin=0.0):
        return np.ones(len(np.atleast_2d(pts)), dtype=bool)

    def __eq__(self, other):
        return isinstance(other, _PointW)


def verify_cfp(cfp: CFPerturbation, chart: KuranishiChart, eps: Sequence[float] = (0.1, 0.01), per_dim: int = 6, tol_omega: float = TOL["omega"], tol_eq: float = TOL["eq"]) -> Report:
    """Normalization and sign of omega, equivariance, and C^1 convergence."""
    rep = Report("verify_cfp")
    if cfp.wdim:
        pts, wts = cfp.W.quadrature(32)
        mass = float(np.dot(cfp.omega_values(pts), wts))
    else:
        mass = 1.0
    rep.add(Check.from_residual("omega_normalized", abs(mass - 1.0), tol_omega, detail="" if abs(mass - 1) <= tol_omega else "OMEGA_NOT_NORMALIZED"))
    rep.results["omega_mass"] = mass
    wsam = cfp.W.samples(per_dim) if cfp.wdim else np.zeros((1, 0))
    wsam = wsam[cfp.W.contains(wsam)] if cfp.wdim else wsam
    ov = cfp.omega_values(wsam)
    rep.add(Check("omega_nonnegative", PASS if ov.min(initial=0.0) >= -1e-14 else FAIL, float(ov.min(initial=0.0))))
    ys = chart.domain.samples(per_dim)
    worst, wit, oinv = 0.0, None, 0.0
    rng = np.random.default_rng(0)
    widx = rng.choice(len(wsam), size=min(len(wsam), 12), replace=False) if len(wsam) else []
    for e_ in eps:
        for wi in widx:
            w = wsam[wi]
            base = cfp.s(ys, w, e_)
            for k, g in enumerate(chart.group.elements):
                a = cfp.action[k] if cfp.wdim else np.zeros((0, 0))
                lhs = cfp.s(ys @ g.T, a @ w, e_)
                rhs = base @ chart.bundle.rho(k).T
                err = np.linalg.norm(lhs - rhs, axis=1).max(initial=0.0)
                if err > worst:
                    worst, wit = float(err), {"w": w, "element": k, "eps": e_}
                if cfp.wdim:
                    oinv = max(oinv, float(abs(cfp.omega_values(a @ w)[0] - cfp.omega_values(w)[0])))
    rep.add(Check.from_residual("equivariance", worst, tol_eq, wit))
    rep.add(Check.from_residual("omega_invariance", oinv, tol_eq))
    gaps = []
    s0, d0 = chart.s(ys), chart.ds(ys)
    for e_ in eps:
        g = 0.0
        for wi in widx if len(widx) else [None]:
            w = wsam[wi] if wi is not None else None
            g = max(g, float(np.abs(cfp.s(ys, w, e_) - s0).max(initial=0.0)) + float(np.abs(cfp.s.jacobian("y")(ys, w, e_) - d0).max(initial=0.0)))
        gaps.append(g)
    C = max((g / e_ for g, e_ in zip(gaps, eps)), default=0.0)
    mono = all(a >= b - 1e-15 for a, b in zip(gaps, gaps[1:]))
    rep.add(Check("c1_convergence", PASS if mono else FAIL, gaps[-1] if gaps else 0.0, detail=f"fitted C = {C:.6g}"))
    rep.results["c1_gaps"] = gaps
    rep.results["C"] = C
    return rep


def _shift_w(expr, offset: int, k: int):
    return sp.sympify(expr).subs({W(i + 1): W(i + 1 + offset) for i in range(k)}, simultaneous=True)


def _product_W(ws: Sequence[Domain]) -> Domain:
    if any(isinstance(w, Ball) for w in ws if w.dim):
        if len([w for w in ws if w.dim]) == 1:
            return next(w for w in ws if w.dim)
        raise VfckitError("MODE_UNSUPPORTED", "products of disk parameter domains are not supported")
    lo, hi = [], []
    for w in ws:
        if w.dim:
            lo += list(w.lower)
            hi += list(w.upper)
    return Box(tuple(lo), tuple(hi)) if lo else _PointW()


def _block_action(parts: Sequence[list], order: int) -> list:
    out = []
    for g in range(order):
        mats = [p[g] for p in parts if len(p) and p[g].size]
        size = sum(m.shape[0] for m in mats)
        M = np.zeros((size, size))
        o = 0
        for m in mats:
            M[o:o + m.shape[0], o:o + m.shape[0]] = m
            o += m.shape[0]
        out.append(M)
    return out


def sum_cfp(base: MapExpr, terms: Sequence[tuple], chart_label: str, group_order: int) -> CFPerturbation:
    """Partition-of-unity sum s + sum_r chi_r g_r^{-1}(s_r^eps o phi_r - s_r o phi_r).

    ``terms`` holds (cfp_r, chi_r, phi_r or None, ginv_r or None, base_r)
    where phi_r maps this chart into cfp_r's chart and ginv_r is the fiber
    map back.  W is the product of the W_r with the product weight.
    """
    offset = 0
    exprs = list(base.exprs)
    omegas, actions, Ws = [], [], []
    n = base.ydim
    for cfp, chi, phi, ginv, base_r in terms:
        k = cfp.wdim
        s_r = MapExpr(tuple(_shift_w(e, offset, k) for e in cfp.s.exprs), cfp.s.ydim, offset + k)
        diff = s_r - MapExpr(tuple(base_r.exprs), base_r.ydim, offset + k)
        if phi is not None:
            diff = diff.compose(phi)
        if ginv is not None:
            diff = ginv.apply(diff)
        for j in range(len(exprs)):
            exprs[j] = exprs[j] + sp.sympify(chi) * diff.exprs[j]
        omegas.append(_shift_w(cfp.omega, offset, k))
        actions.append(cfp.action)
        Ws.append(cfp.W)
        offset += k
    W_ = _product_W(Ws)
    return CFPerturbation(chart_label, W_, _block_action(actions, group_order), sp.Mul(*omegas), MapExpr(tuple(exprs), n, offset))


def extend_cfp(cfp: CFPerturbation, src: KuranishiChart, dst: KuranishiChart, datum: Optional[BundleExtensionDatum], chi=None, own: Optional[CFPerturbation] = None, hom: Optional[Sequence[int]] = None) -> CFPerturbation:
    """Extend along extension data: s_2 + chi F (s_1^eps o pi - s_1 o pi) [+ (1 - chi) own]."""
    if datum is None:
        raise VfckitError("MISSING_EXTENSION_DATA", f"no bundle extension datum for {src.label} -> {dst.label}")
    k1 = cfp.wdim
    diff = (cfp.s - MapExpr(tuple(src.s.exprs), src.dim, k1)).compose(datum.pi)
    moved = datum.fiber.apply(diff)
    chi = sp.Integer(1) if chi is None else sp.sympify(chi)
    exprs = [a + chi * b for a, b in zip(dst.s.exprs, moved.exprs)]
    omegas, Ws = [cfp.omega], [cfp.W]
    hom = hom or list(range(src.group.order))
    # the source action is indexed by source elements; re-index by target elements
    act_src = {}
    for i, h in enumerate(hom):
        act_src[h] = cfp.action[i] if k1 else np.zeros((0, 0))
    actions = [[act_src.get(g, np.eye(k1)) for g in range(dst.group.order)]]
    wdim = k1
    if own is not None:
        k2 = own.wdim
        own_s = MapExpr(tuple(_shift_w(e, k1, k2) for e in own.s.exprs), dst.dim, k1 + k2)
        extra = own_s - MapExpr(tuple(dst.s.exprs), dst.dim, k1 + k2)
        exprs = [a + (1 - chi) * b for a, b in zip(exprs, extra.exprs)]
        omegas.append(_shift_w(own.omega, k1, k2))
        Ws.append(own.W)
        actions.append(own.action)
        wdim += k2
    W_ = _product_W(Ws)
    return CFPerturbation(dst.label, W_, _block_action(actions, dst.group.order), sp.Mul(*omegas), MapExpr(tuple(exprs), dst.dim, wdim))


@dataclass
class CFSystem:
    """CF-perturbations on every piece of a good coordinate system."""

    cfps: dict

    def __getitem__(self, piece: str) -> CFPerturbation:
        return self.cfps[piece]


def build_cfp_system(gcs: GoodCoordinateSystem, power: int = 4, support: str = "K", f: Optional[dict] = None, eps: Sequence[float] = (0.1,), per_dim: int = 10) -> tuple:
    """Upward induction over the poset: extend from lower pieces, add own parameters.

    Returns (CFSystem, Report).  The report records transversality (and
    strong submersivity for maps ``f`` given per piece) at each eps.
    """
    rep = Report("build_cfp_system")
    out = {}
    for piece in gcs.pieces():
        chart = gcs.charts[piece]
        preds = [c for c in gcs.predecessors(piece) if c.src in out]
        if chart.rank == 0:
            cfp = empty_cfp(chart)
        else:
            own = standard_cfp(chart, power)
            cfp = own
            for c in preds:
                datum = gcs.extension_data.get((c.src, c.dst))
                if datum is None:
                    raise VfckitError("FILTER_INDUCTION_STUCK", f"cannot extend {c.src} -> {piece}: no extension datum")
                K = gcs.support(support)[c.src]
                chi = extension_cutoff(datum, c.phi, K, chart.dim, 0.25, 0.1)
                try:
                    cfp = extend_cfp(out[c.src], gcs.charts[c.src], chart, datum, chi, own, c.hom)
                except VfckitError as exc:
                    raise VfckitError("FILTER_INDUCTION_STUCK", f"extension to {piece} failed: {exc.message}") from exc
                break
        out[piece] = cfp
        for e_ in eps:
            wpts, _ = cfp.w_rule(4)
            ok, sub_ok = True, True
            fmap = (f or {}).get(piece)
            for w in wpts:
                tr = check_transversality([cfp.s], chart, e_, f=fmap, per_dim=per_dim, w=w)
                ok &= tr.transversal or tr.zeros == 0 or chart.rank == 0
                if fmap is not None:
                    sub_ok &= bool(tr.strongly_submersive) or tr.zeros == 0
            rep.add(Check(f"transversal[{piece}, eps={e_}]", PASS if ok else FAIL))
            if fmap is not None:
                rep.add(Check(f"strongly_submersive[{piece}, eps={e_}]", PASS if sub_ok else FAIL))
    return CFSystem(out), rep


def product_fiberproduct_cfp(a: CFPerturbation, ca: KuranishiChart, b: CFPerturbation, cb: KuranishiChart, fa: Optional[MapExpr] = None, fb: Optional[MapExpr] = None) -> CFPerturbation:
    """Direct or fiber product: W = W_a x W_b, omega = omega_a omega_b, s = (s_a, s_b[, f_a - f_b])."""
    from .kuranishi import _is_identity, _shift

    extra = ()
    if fa is not None and fb is not None and fa.dim:
        chk = check_transversal_maps(ca, fa, cb, fb)
        if chk.status == FAIL:
            raise VfckitError("NOT_TRANSVERSAL", "maps are not transversal", witness=chk.witness)
        if cb.group.order == 1 and _is_identity(fb, cb.dim) and b.wdim == 0:
            pulled = MapExpr(tuple(cb.s.exprs), cb.dim).compose(fa) if cb.rank else MapExpr((), ca.dim)
            return CFPerturbation(f"{ca.label}x{cb.label}", a.W, a.action, a.omega, MapExpr(tuple(a.s.exprs) + tuple(pulled.exprs), ca.dim, a.wdim))
        extra = tuple(e1 - e2 for e1, e2 in zip(fa.exprs, _shift(fb.exprs, ca.dim, cb.dim)))
    ka, kb = a.wdim, b.wdim
    sa = tuple(a.s.exprs)
    sb = tuple(_shift_w(e, ka, kb) for e in _shift(b.s.exprs, ca.dim, cb.dim))
    n = ca.dim + cb.dim
    W_ = _product_W([a.W, b.W])
    actions = []
    for i, j in itertools.product(range(ca.group.order), range(cb.group.order)):
        A = a.action[i] if ka else np.zeros((0, 0))
        B = b.action[j] if kb else np.zeros((0, 0))
        M = np.zeros((ka + kb, ka + kb))
        M[:ka, :ka] = A
        M[ka:, ka:] = B
        actions.append(M)
    return CFPerturbation(f"{ca.label}x{cb.label}", W_, actions, sp.sympify(a.omega) * _shift_w(b.omega, ka, kb), MapExpr(sa + sb + extra, n, ka + kb))


# -- zero sets and convergence ---------------------------------------------------


def zero_cloud(chart: KuranishiChart, section: MapExpr, t: float, wpts: np.ndarray, per_dim: int = 24, domain: Optional[Domain] = None) -> np.ndarray:
    """Chart points of the zero set of section(., w, t), over parameter nodes w."""
    dom = domain or chart.domain
    out = []
    for w in wpts:
        z = _zeros_of(section, chart.dim, dom, per_dim, t, w if len(w) else None)
        if len(z):
            out.append(z)
    return np.vstack(out) if out else np.zeros((0, chart.dim))


def _distance_to_zero_set(chart: KuranishiChart, section: MapExpr, pts: np.ndarray, t: float, w) -> np.ndarray:
    if not len(pts):
        return np.zeros(0)
    jac = section.jacobian("y")
    proj, ok = project_to_zeros(lambda y: section(y, w, t), lambda y: jac(y, w, t), pts)
    d = np.linalg.norm(chart.gc(proj) - chart.gc(pts), axis=1)
    d[~ok] = np.inf
    return d


def hausdorff_to_X(chart: KuranishiChart, section: MapExpr, t: float, wpts: np.ndarray, per_dim: int = 24, domain: Optional[Domain] = None) -> float:
    """d_H between the perturbed zero set (over the nodes w) and X, in global coordinates."""
    dom = domain or chart.domain
    X = chart.zero_samples(per_dim, dom)
    Z = []
    dz = 0.0
    for w in wpts:
        wv = w if len(w) else None
        z = _zeros_of(section, chart.dim, dom, per_dim, t, wv)
        if len(z):
            Z.append((wv, z))
            dz = max(dz, float(_distance_to_zero_set(chart, chart.s, z, 0.0, None).max()))
    if not Z:
        return 0.0 if not len(X) else np.inf
    dx = 0.0
    for x in X:
        best = np.inf
        for wv, _ in Z:
            best = min(best, float(_distance_to_zero_set(chart, section, x[None, :], t, wv)[0]))
        dx = max(dx, best)
    return max(dz, dx)


def zero_support_and_convergence(gcs: GoodCoordinateSystem, sections: dict, params: Sequence[float], wrules: Optional[dict] = None, per_dim: int = 24, delta_U: float = TOL["delta_U"]) -> dict:
    """Support containment, K1 versus K2 agreement near X, and d_H per parameter.

    ``sections[piece]`` is a list of MapExpr branches (multisection) or a
    single CF section; ``wrules[piece]`` gives the parameter nodes used for
    CF sections.  ``params`` are eps values (or 1/n for multisections).
    """
    out = {"params": list(params), "d_H": [], "inside_K": [], "K1_equals_K2": []}
    for t in params:
        dh, inside, same = 0.0, True, True
        for piece in gcs.pieces():
            chart = gcs.charts[piece]
            wpts = (wrules or {}).get(piece, np.zeros((1, 0)))
            for sec in sections[piece]:
                dh = max(dh, hausdorff_to_X(chart, sec, t, wpts, per_dim))
                Z = zero_cloud(chart, sec, t, wpts, per_dim)
                if not len(Z):
                    continue
                X = chart.zero_samples(per_dim)
                near = np.array([np.min(np.linalg.norm(chart.gc(X) - chart.gc(z[None, :]), axis=1)) < delta_U for z in Z]) if len(X) else np.zeros(len(Z), bool)
                K = gcs.K[piece]
                K2 = gcs.support("K2")[piece]
                inside &= bool(np.all(K.contains(Z[near], -delta_U))) if near.any() else True
                same &= bool(np.array_equal(K.contains(Z[near]), K2.contains(Z[near]))) if near.any() else True
        out["d_H"].append(dh)
        out["inside_K"].append(inside)
        out["K1_equals_K2"].append(same)
    out["decreasing"] = all(a > b for a, b in zip(out["d_H"], out["d_H"][1:]))
    return out
