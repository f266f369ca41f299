"""Weighted zero sets, rational multiplicities and virtual fundamental chains."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import sympy as sp

from .errors import VfckitError
from .expr import MapExpr, Y, coerce_expr
from .gcs import GoodCoordinateSystem
from .kuranishi import KuranishiChart, normalized_boundary
from .numerics import cluster, newton, parallel_map, sorted_rows
from .orbifold import Box, Domain, stabilizer
from .perturbation import Multisection, MultivaluedPerturbation, label_hash
from .report import FAIL, GRID, PASS, TOL, Check, Report, frac_str


@dataclass
class ZeroPoint:
    chart: str
    y: np.ndarray
    g: np.ndarray
    stabilizer_order: int = 1
    ell: int = 1
    signs: tuple = ()
    multiplicity: Fraction = Fraction(0)

    def to_dict(self) -> dict:
        return {
            "chart": self.chart,
            "y": [float(v) for v in self.y],
            "global": [float(v) for v in self.g],
            "stabilizer_order": self.stabilizer_order,
            "ell": self.ell,
            "signs": list(self.signs),
            "multiplicity": frac_str(self.multiplicity),
        }


@dataclass
class WeightedZeroSet:
    points: list = field(default_factory=list)
    nonconvergent: int = 0

    @property
    def total(self) -> Fraction:
        return sum((p.multiplicity for p in self.points), Fraction(0))

    def to_dict(self) -> dict:
        return {"points": [p.to_dict() for p in self.points], "total": frac_str(self.total), "nonconvergent_seeds": self.nonconvergent}


@dataclass
class RationalChain:
    total: Fraction
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"total": frac_str(self.total), "provenance": self.provenance}


@dataclass
class _Piece:
    """Input of the generic zero counter: one chart with its branches."""

    label: str
    chart: KuranishiChart
    branches: tuple
    support: Domain
    X: np.ndarray  # global samples of the unperturbed zero set
    t: float = 0.0


def _branch_zeros(piece: _Piece, grid: int) -> tuple:
    chart = piece.chart
    seeds = piece.support.samples(grid)
    seeds = seeds[chart.domain.contains(seeds)]
    found, bad = [], 0

    def solve(b: MapExpr):
        jac = b.jacobian("y")
        pts, ok = newton(lambda y: b(y, t=piece.t), lambda y: jac(y, t=piece.t), seeds)
        return pts, ok

    results = parallel_map(solve, piece.branches)
    for i, (pts, ok) in enumerate(results):
        bad += int((~ok).sum())
        pts = pts[ok]
        pts = pts[chart.domain.contains(pts)]
        if not len(pts):
            continue
        lab = cluster(pts, 1e-9)
        reps = np.array([pts[lab == k][0] for k in range(lab.max() + 1)])
        for y in sorted_rows(reps):
            found.append((i, y))
    return found, bad


def _near_X(g: np.ndarray, X: np.ndarray, delta_U: float) -> bool:
    if not len(X):
        return False
    # closed neighbourhood, with a rounding allowance for zeros on its edge
    return bool(np.min(np.linalg.norm(X - g[None, :], axis=1)) <= delta_U * (1 + 1e-12))


def _signs_at(piece: _Piece, y: np.ndarray, tol_zero: float, tol_det: float) -> tuple:
    """Sign of the oriented Jacobian of every branch vanishing at y."""
    out = []
    for b in piece.branches:
        v = b.at(y, t=piece.t)
        if np.max(np.abs(v), initial=0.0) > tol_zero:
            out.append(0)
            continue
        d = float(np.linalg.det(b.jacobian("y").at(y, t=piece.t))) if b.dim else 1.0
        if abs(d) < tol_det:
            raise VfckitError("SIGN_UNDETERMINED", f"|det| = {abs(d):.3g} at a zero of chart {piece.label}", witness=y)
        out.append(int(np.sign(d)) * piece.chart.orientation)
    return tuple(out)


def multiplicity(piece: _Piece, y: np.ndarray, tol_zero: float = TOL["zero"], tol_det: float = TOL["det"]) -> tuple:
    """(m_p, #Gamma_p, signs): m_p = sum_i eps_i / (ell * #Gamma_p), exactly."""
    _, idx = stabilizer(piece.chart.base, y, 1e-9)
    signs = _signs_at(piece, y, tol_zero, tol_det)
    ell = len(piece.branches)
    return Fraction(sum(signs), ell * len(idx)), len(idx), signs


def weighted_zeros(pieces: Sequence[_Piece], grid: int = GRID, delta_U: float = TOL["delta_U"], r_dedup: float = TOL["dedup"], tol_zero: float = TOL["zero"], tol_det: float = TOL["det"]) -> WeightedZeroSet:
    """Find, clip, deduplicate and weigh the zeros of the given pieces."""
    cands, bad = [], 0
    for piece in pieces:
        found, nb = _branch_zeros(piece, grid)
        bad += nb
        for i, y in found:
            if not piece.support.contains(y)[0]:
                continue
            g = piece.chart.gc.at(y)
            if not _near_X(g, piece.X, delta_U):
                continue
            cands.append((piece, y, g))
    # identify candidates in the same orbit (same chart) or with equal global
    # position (different charts)
    classes = []
    for piece, y, g in cands:
        placed = False
        for cl in classes:
            p0, y0, g0 = cl[0]
            if p0.label == piece.label:
                orbit = piece.chart.group.orbit(y)
                same = np.min(np.linalg.norm(orbit - y0[None, :], axis=1)) < r_dedup
            else:
                gs = piece.chart.gc(piece.chart.group.orbit(y))
                same = np.min(np.linalg.norm(gs - g0[None, :], axis=1)) < r_dedup
            if same:
                cl.append((piece, y, g))
                placed = True
                break
        if not placed:
            classes.append([(piece, y, g)])
    points = []
    for cl in classes:
        piece, y, g = cl[0]
        m, order, signs = multiplicity(piece, y, tol_zero, tol_det)
        points.append(ZeroPoint(piece.label, y, g, order, len(piece.branches), signs, m))
    points.sort(key=lambda p: (p.chart, tuple(np.round(p.y, 12))))
    return WeightedZeroSet(points, bad)


def _X_samples(gcs: GoodCoordinateSystem, per_dim: int = 12) -> np.ndarray:
    clouds = [g for (_, _, g) in gcs.footprint_samples(per_dim)]
    return np.array(clouds) if clouds else np.zeros((0, 1))


def solve_zeros_dim0(gcs: GoodCoordinateSystem, mvp: MultivaluedPerturbation, n: int, support: str = "Kprime", delta_U: float = TOL["delta_U"], grid: int = GRID, tol: Optional[dict] = None) -> WeightedZeroSet:
    """Zeros of s^n (t = 1/n) on every piece, clipped to U(X) and the support."""
    vd = gcs.vdim
    if vd < 0:
        return WeightedZeroSet()
    if vd != 0:
        raise VfckitError("NOT_VDIM0", f"virtual dimension is {vd}")
    tol = tol or {}
    X = _X_samples(gcs)
    sup = gcs.support(support)
    pieces = [_Piece(p, gcs.charts[p], mvp.sections[p].branches, sup[p], X, 1.0 / n) for p in gcs.pieces()]
    return weighted_zeros(pieces, grid, delta_U, tol.get("dedup", TOL["dedup"]), tol.get("zero", TOL["zero"]), tol.get("det", TOL["det"]))


def virtual_chain_dim0(
    gcs: GoodCoordinateSystem,
    mvp: MultivaluedPerturbation,
    n: int,
    supports: Sequence[str] = ("Kprime", "K2prime"),
    delta_U: float = TOL["delta_U"],
    grid: int = GRID,
    scenario: str = "",
) -> tuple:
    """Exact rational count; with two support systems the totals must agree."""
    rep = Report("count")
    totals = {}
    zsets = {}
    for s in supports:
        z = solve_zeros_dim0(gcs, mvp, n, s, delta_U, grid)
        totals[s] = z.total
        zsets[s] = z
    first = zsets[supports[0]]
    same = len(set(totals.values())) == 1
    if len(supports) > 1:
        rep.add(Check("support_independence", PASS if same else FAIL, witness=None if same else {k: frac_str(v) for k, v in totals.items()}))
    if first.nonconvergent:
        rep.add(Check("newton_seeds", PASS, float(first.nonconvergent), detail="NEWTON_NONCONVERGENT_SEEDS"))
    chain = RationalChain(first.total, {"scenario": scenario, "n": n, "seed": mvp.seed, "support": supports[0], "delta_U": delta_U})
    rep.results["total"] = first.total
    rep.results["totals_by_support"] = totals
    rep.results["zeros"] = first.to_dict()
    return chain, rep


# -- boundary --------------------------------------------------------------------


def boundary_pieces(gcs: GoodCoordinateSystem, mvp: MultivaluedPerturbation, n: int, support: str = "Kprime") -> list:
    """Normalized-boundary charts with the restricted multisections."""
    out = []
    sup = gcs.support(support)
    for p in gcs.pieces():
        chart = gcs.charts[p]
        if not isinstance(chart.domain, Box):
            continue
        bd = normalized_boundary(chart)
        for bc, face in zip(bd.charts, bd.faces):
            ms = mvp.sections[p].restrict_face(chart, face)
            K = sup[p]
            fK = K.face_domain(face) if isinstance(K, Box) and face in K.faces() else bc.domain
            out.append(_Piece(bc.label, bc, ms.branches, fK, np.zeros((0, bc.gc.dim)), 1.0 / n))
    return out


def boundary_vanishing_check(gcs: GoodCoordinateSystem, mvp: MultivaluedPerturbation, n: int, support: str = "Kprime", delta_U: float = TOL["delta_U"], grid: int = GRID) -> Report:
    """The 0-chain on the normalized boundary must vanish exactly."""
    if gcs.vdim != 1:
        raise VfckitError("COMMAND_SCENARIO_MISMATCH", f"boundary check needs virtual dimension 1, got {gcs.vdim}")
    rep = Report("boundary")
    pieces = boundary_pieces(gcs, mvp, n, support)
    for pc in pieces:
        pc.X = pc.chart.gc(pc.chart.zero_samples(24)) if pc.chart.rank else pc.chart.gc(pc.chart.domain.samples(4))
    try:
        z = weighted_zeros(pieces, max(grid, 16), delta_U)
    except VfckitError as exc:
        if exc.code == "SIGN_UNDETERMINED":
            raise VfckitError("BOUNDARY_NOT_TRANSVERSAL", exc.message, witness=exc.witness) from exc
        raise
    rep.results["total"] = z.total
    rep.results["zeros"] = z.to_dict()
    rep.add(Check("boundary_chain_zero", PASS if z.total == 0 else FAIL, float(abs(z.total)), None if z.total == 0 else frac_str(z.total)))
    return rep


# -- level sweep -----------------------------------------------------------------


def _random_polynomial(rng: np.random.Generator, n: int) -> sp.Expr:
    """Seeded polynomial of degree <= 2 with dyadic coefficients."""
    terms = [sp.Integer(1)] + [Y(i + 1) for i in range(n)] + [Y(i + 1) * Y(j + 1) for i in range(n) for j in range(i, n)]
    coef = np.round(rng.uniform(-1, 1, size=len(terms)) * 256) / 256
    return sum(sp.Rational(int(round(c * 256)), 256) * t for c, t in zip(coef, terms))


def _scaled_perturbation(rng, chart: KuranishiChart, size: float) -> sp.Expr:
    poly = _random_polynomial(rng, chart.dim)
    vals = MapExpr((poly,), chart.dim)(chart.domain.samples(8))
    sup = float(np.max(np.abs(vals))) or 1.0
    return poly * sp.nsimplify(size / sup, rational=True, tolerance=1e-12)


def _critical_values(chart: KuranishiChart, branch: MapExpr, f: sp.Expr, t: float, grid: int) -> tuple:
    """Critical points of f on the zero set of a branch: (values, nondegenerate flag)."""
    n = chart.dim
    Ds = branch.jacobian("y").sympy() if hasattr(branch.jacobian("y"), "sympy") else None
    rows = Ds.tolist() + [[sp.diff(f, Y(j + 1)) for j in range(n)]]
    det = sp.Matrix(rows).det()
    system = MapExpr(tuple(branch.exprs) + (det,), n)
    jac = system.jacobian("y")
    seeds = chart.domain.samples(grid)
    pts, ok = newton(lambda y: system(y, t=t), lambda y: jac(y, t=t), seeds)
    pts = pts[ok & chart.domain.contains(pts)]
    if not len(pts):
        return [], True
    lab = cluster(pts, 1e-8)
    reps = np.array([pts[lab == k][0] for k in range(lab.max() + 1)])
    fvals = MapExpr((f,), n)(reps)[:, 0]
    nondeg = all(abs(np.linalg.det(jac.at(p, t=t))) > TOL["det"] for p in reps)
    return sorted(float(v) for v in fvals), nondeg


def level_sweep(
    gcs: GoodCoordinateSystem,
    mvp: MultivaluedPerturbation,
    n: int,
    f: sp.Expr,
    levels: Sequence[float],
    seed: int = 0,
    delta_S: float = 1e-3,
    max_retry: int = 8,
    grid: int = 24,
    above: Optional[float] = None,
) -> Report:
    """0-chains on the level sets {f = s} of the perturbed zero set.

    f is perturbed by a seeded polynomial of sup-norm 1e-3 (Morse genericity);
    levels within delta_S of a critical value are skipped (LEVEL_CRITICAL).
    """
    if gcs.vdim != 1:
        raise VfckitError("COMMAND_SCENARIO_MISMATCH", f"sweep needs virtual dimension 1, got {gcs.vdim}")
    rep = Report("sweep")
    f = coerce_expr(f)
    t = 1.0 / n
    piece = gcs.pieces()[0]
    chart = gcs.charts[piece]
    ms = mvp.sections[piece]
    normal_ok = _normal_positivity(chart, f)
    rep.add(Check("normal_positivity", PASS if normal_ok else FAIL))
    crit, fp = [], None
    for attempt in range(max_retry):
        rng = np.random.default_rng([int(seed), label_hash(piece), 1000 + attempt])
        fp = sp.sympify(f) + _scaled_perturbation(rng, chart, 1e-3)
        crit, nondeg = [], True
        for b in ms.branches:
            cv, nd = _critical_values(chart, b, fp, t, grid)
            crit += cv
            nondeg &= nd
        if nondeg:
            break
    else:
        rep.add(Check("morse_nondegenerate", FAIL))
    rep.results["critical_values"] = sorted(crit)
    chains, skipped = {}, []
    all_levels = list(levels) + ([above] if above is not None else [])
    for s in all_levels:
        if any(abs(s - c) < delta_S for c in crit):
            skipped.append(s)
            continue
        chains[s] = _level_chain(chart, ms, fp, s, t, grid)
    regular = [chains[s].total for s in levels if s in chains]
    const = len(set(regular)) <= 1
    rep.add(Check("constant_across_levels", PASS if const else FAIL, witness=None if const else [frac_str(v) for v in regular]))
    if above is not None and above in chains:
        empty = len(chains[above].points) == 0
        rep.add(Check("empty_above_max", PASS if empty else FAIL, float(len(chains[above].points))))
    if skipped:
        rep.add(Check("critical_levels_skipped", PASS, float(len(skipped)), skipped, detail="LEVEL_CRITICAL"))
    rep.results["levels"] = {f"{s:g}": {"total": frac_str(c.total), "points": len(c.points)} for s, c in chains.items()}
    rep.results["regular_levels"] = len(regular)
    return rep


def _normal_positivity(chart: KuranishiChart, f: sp.Expr) -> bool:
    """Inward derivative of f is positive on boundary samples."""
    if not isinstance(chart.domain, Box):
        return True
    grad = MapExpr(tuple(sp.diff(f, Y(j + 1)) for j in range(chart.dim)), chart.dim)
    for face in chart.domain.faces():
        i, side, _ = face
        pts = chart.domain.face_samples(face, 6)
        inward = 1.0 if side == "lower" else -1.0
        if isinstance(chart.domain, Box) and not len(pts):
            continue
        if np.any(grad(pts)[:, i] * inward <= 0):
            return False
    return True


def _level_chain(chart: KuranishiChart, ms: Multisection, f: sp.Expr, s: float, t: float, grid: int) -> WeightedZeroSet:
    """Signed points of {branch = 0, f = s}; sign = -sign(Df . T) (outward normal first)."""
    n = chart.dim
    branches = []
    for b in ms.branches:
        branches.append(MapExpr(tuple(b.exprs) + (sp.sympify(f) - sp.nsimplify(s, rational=True),), n))
    seeds = chart.domain.samples(grid)
    found = []
    for i, sysm in enumerate(branches):
        jac = sysm.jacobian("y")
        pts, ok = newton(lambda y: sysm(y, t=t), lambda y: jac(y, t=t), seeds)
        pts = pts[ok & chart.domain.contains(pts)]
        if not len(pts):
            continue
        lab = cluster(pts, 1e-9)
        for y in sorted_rows(np.array([pts[lab == k][0] for k in range(lab.max() + 1)])):
            found.append((i, y))
    points = []
    ell = ms.ell
    seen = []
    for i, y in found:
        if any(np.linalg.norm(y - z) < TOL["dedup"] for z in seen):
            continue
        seen.append(y)
        signs = []
        for b, sysm in zip(ms.branches, branches):
            if np.max(np.abs(sysm.at(y, t=t))) > TOL["zero"]:
                signs.append(0)
                continue
            J = sysm.jacobian("y").at(y, t=t)
            Ds, Df = J[:-1], J[-1]
            T = _oriented_tangent(Ds)
            d = float(Df @ T)
            if abs(d) < TOL["det"]:
                raise VfckitError("LEVEL_CRITICAL", f"level {s} is critical", witness=y)
            signs.append(-int(np.sign(d)) * chart.orientation)
        _, idx = stabilizer(chart.base, y, 1e-9)
        points.append(ZeroPoint(chart.label, y, chart.gc.at(y), len(idx), ell, tuple(signs), Fraction(sum(signs), ell * len(idx))))
    return WeightedZeroSet(points)


def _oriented_tangent(J: np.ndarray) -> np.ndarray:
    """Kernel vector T of a full-rank (n-1) x n matrix with det[T; J] > 0."""
    n = J.shape[1]
    T = np.array([(-1) ** j * np.linalg.det(np.delete(J, j, axis=1)) if n > 1 else 1.0 for j in range(n)])
    return T
