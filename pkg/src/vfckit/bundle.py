"""Vector bundles over orbifold charts.

Fibers are always R^k; the group acts on them through explicit matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import VfckitError
from .expr import MapExpr, MatrixExpr
from .orbifold import Domain, FiniteGroupAction, OrbifoldChart, _effectivity_candidates, is_homomorphism
from .report import FAIL, PASS, TOL, Check, Report


@dataclass
class BundleChart:
    base: OrbifoldChart
    fiber_dim: int
    representation: list  # one (k x k) matrix per group element, same order
    label: str = ""

    def __post_init__(self):
        k = self.fiber_dim
        reps = []
        for i, m in enumerate(self.representation):
            a = np.asarray(m, dtype=float).reshape(k, k) if k else np.zeros((0, 0))
            reps.append(a)
        if len(reps) != self.base.group.order:
            raise VfckitError("MALFORMED_MATRIX", f"{len(reps)} representation matrices for a group of order {self.base.group.order}")
        self.representation = reps
        if not self.label:
            self.label = self.base.label

    @classmethod
    def trivial(cls, base: OrbifoldChart, fiber_dim: int) -> "BundleChart":
        return cls(base, fiber_dim, [np.eye(fiber_dim)] * base.group.order)

    @property
    def group(self) -> FiniteGroupAction:
        return self.base.group

    def rho(self, k: int) -> np.ndarray:
        return self.representation[k]

    def homomorphism_residual(self) -> float:
        if self.fiber_dim == 0:
            return 0.0
        tab = self.group.table
        worst = 0.0
        n = self.group.order
        for i in range(n):
            for j in range(n):
                if tab[i, j] < 0:
                    return np.inf
                worst = max(worst, float(np.max(np.abs(self.rho(i) @ self.rho(j) - self.rho(tab[i, j])))))
        return worst

    def verify(self, tol_grp: float = TOL["grp"]) -> Report:
        rep = Report("verify_bundle")
        rep.add(Check.from_residual("representation_homomorphism", self.homomorphism_residual(), tol_grp))
        return rep


def equivariance_residual(section: MapExpr, bundle: BundleChart, pts: np.ndarray) -> tuple:
    """max over points and elements of |s(g y) - rho(g) s(y)|, with the worst (y, g)."""
    worst, wit = 0.0, None
    if bundle.fiber_dim == 0 or len(pts) == 0:
        return 0.0, None
    base = section(pts)
    for k, e in enumerate(bundle.group.elements):
        lhs = section(pts @ e.T)
        rhs = base @ bundle.rho(k).T
        err = np.linalg.norm(lhs - rhs, axis=1)
        i = int(np.argmax(err))
        if err[i] > worst + 1e-15:
            worst = float(err[i])
            wit = {"point": pts[i], "element": k, "matrix": e}
    return worst, wit


def local_expression(section: MapExpr, bundle: BundleChart, per_dim: int = 10, tol_eq: float = TOL["eq"]) -> tuple:
    """Validate an equivariant local expression; returns (evaluator, report).

    Raises EQUIVARIANCE_FAIL with the first witness (y, gamma) found, trying
    points next to the base point before the sample grid.
    """
    if section.dim != bundle.fiber_dim:
        raise VfckitError("TYPE_ERROR", f"section has {section.dim} components, fiber has dimension {bundle.fiber_dim}")
    pts = _effectivity_candidates(bundle.base, per_dim)
    for p in pts:
        r, w = equivariance_residual(section, bundle, p[None, :])
        if r > tol_eq:
            raise VfckitError("EQUIVARIANCE_FAIL", f"section is not equivariant (residual {r:.3g})", witness=w)
    r, w = equivariance_residual(section, bundle, pts)
    rep = Report("local_expression")
    rep.add(Check.from_residual("equivariance", r, tol_eq, w))
    return section, rep


@dataclass
class BundleEmbedding:
    """Embedding of bundle charts: base map phi, group hom, fiber matrices G(y)."""

    src: BundleChart
    dst: BundleChart
    phi: MapExpr
    hom: tuple
    fiber: MatrixExpr  # dst.fiber_dim x src.fiber_dim, in source coordinates
    domain: Optional[Domain] = None

    def samples(self, per_dim: int = 10) -> np.ndarray:
        dom = self.domain or self.src.base.domain
        pts = dom.samples(per_dim)
        return pts[self.src.base.domain.contains(pts)]

    def verify(self, per_dim: int = 10, tol_eq: float = TOL["eq"], tol_rank: float = TOL["rank"]) -> Report:
        rep = Report("verify_bundle_embedding")
        ok = is_homomorphism(self.src.group, self.dst.group, self.hom)
        rep.add(Check("hom_monomorphism", PASS if ok else FAIL))
        pts = self.samples(per_dim)
        img = self.phi(pts)
        inside = self.dst.base.domain.contains(img)
        rep.add(Check("image_in_target", PASS if inside.all() else FAIL, witness=None if inside.all() else pts[~inside][0]))
        worst_b, worst_f, wb, wf = 0.0, 0.0, None, None
        if ok:
            G = self.fiber(pts)
            for k, e in enumerate(self.src.group.elements):
                h = self.hom[k]
                err = np.linalg.norm(self.phi(pts @ e.T) - img @ self.dst.group.elements[h].T, axis=1)
                if err.max(initial=0) > worst_b:
                    worst_b, wb = float(err.max()), {"point": pts[int(err.argmax())], "element": k}
                if self.src.fiber_dim and self.dst.fiber_dim:
                    lhs = self.fiber(pts @ e.T) @ self.src.rho(k)
                    rhs = self.dst.rho(h)[None] @ G
                    ferr = np.abs(lhs - rhs).reshape(len(pts), -1).max(axis=1)
                    if ferr.max(initial=0) > worst_f:
                        worst_f, wf = float(ferr.max()), {"point": pts[int(ferr.argmax())], "element": k}
        rep.add(Check.from_residual("base_equivariance", worst_b, tol_eq, wb))
        rep.add(Check.from_residual("fiber_equivariance", worst_f, tol_eq, wf))
        smin = min_singular_value(self.fiber, pts)
        rep.add(Check("fiber_injective", PASS if smin[0] > tol_rank else FAIL, smin[0], None if smin[0] > tol_rank else smin[1]))
        return rep


def min_singular_value(mat: MatrixExpr, pts: np.ndarray) -> tuple:
    """Smallest singular value of mat(y) over points, with the minimizing point."""
    m, k = mat.shape
    if k == 0 or len(pts) == 0:
        return np.inf, None
    if m < k:
        return 0.0, pts[0]
    vals = mat(pts)
    sv = np.linalg.svd(vals, compute_uv=False)[:, -1]
    i = int(np.argmin(sv))
    return float(sv[i]), pts[i]


def pullback_bundle(bundle: BundleChart, emb: BundleEmbedding, verified: Optional[bool] = None) -> BundleChart:
    """Bundle over the embedding's source with fibers of ``bundle`` and rho o h."""
    if verified is None:
        verified = emb.verify().passed
    if not verified:
        raise VfckitError("UNVERIFIED_EMBEDDING", "embedding failed verification")
    reps = [bundle.rho(emb.hom[k]) for k in range(emb.src.group.order)]
    return BundleChart(emb.src.base, bundle.fiber_dim, reps, label=f"{bundle.label}|{emb.src.label}")


def compose_embeddings(first: BundleEmbedding, second: BundleEmbedding) -> BundleEmbedding:
    """``second`` after ``first`` (first: a -> b, second: b -> c)."""
    phi = second.phi.compose(first.phi)
    hom = tuple(second.hom[h] for h in first.hom)
    fiber = second.fiber.compose(first.phi).matmul(first.fiber)
    return BundleEmbedding(first.src, second.dst, phi, hom, fiber, first.domain)


@dataclass
class BundleExtensionDatum:
    """Retraction pi: Omega -> U_1 (Omega inside U_2) and fiber extension F(y): E_1 -> E_2."""

    src: str
    dst: str
    pi: MapExpr  # dst coordinates -> src coordinates
    fiber: MatrixExpr  # dst.fiber_dim x src.fiber_dim, in dst coordinates
    domain: Optional[Domain] = None  # Omega, in dst coordinates
    src_domain: Optional[Domain] = None  # Omega_1, in src coordinates


def verify_bundle_extension(
    datum: BundleExtensionDatum,
    emb: BundleEmbedding,
    K: Optional[Domain] = None,
    per_dim: int = 10,
    tol_eq: float = TOL["eq"],
    tol_rank: float = TOL["rank"],
    strict: bool = True,
) -> Report:
    """Retraction, restriction-to-locus and rank conditions on samples.

    Raises DOMAIN_TOO_SMALL when the embedded image of K is not inside Omega
    (unless ``strict`` is False, in which case it is reported as a FAIL).
    """
    rep = Report("verify_bundle_extension")
    K = K or emb.domain or emb.src.base.domain
    xs = K.samples(per_dim)
    xs = xs[emb.src.base.domain.contains(xs)]
    img = emb.phi(xs)
    if datum.domain is not None:
        inside = datum.domain.contains(img)
        if not inside.all():
            wit = xs[~inside][0]
            if strict:
                raise VfckitError("DOMAIN_TOO_SMALL", "embedded support leaves the datum's domain", witness=wit)
            rep.add(Check("domain_contains_image", FAIL, witness=wit))
        else:
            rep.add(Check("domain_contains_image", PASS))
    back = datum.pi(img)
    r1 = np.linalg.norm(back - xs, axis=1)
    rep.add(Check.from_residual("retraction_identity", r1.max(initial=0.0), tol_eq, xs[int(r1.argmax())] if len(r1) else None))
    if datum.fiber.shape[1]:
        F = datum.fiber(img)
        G = emb.fiber(xs)
        r2 = np.abs(F - G).reshape(len(xs), -1).max(axis=1)
        rep.add(Check.from_residual("restriction_to_locus", r2.max(initial=0.0), tol_eq, xs[int(r2.argmax())] if len(r2) else None))
        ys = (datum.domain or emb.dst.base.domain).samples(per_dim)
        ys = ys[emb.dst.base.domain.contains(ys)]
        near = np.vstack([img, ys])
        smin, wit = min_singular_value(datum.fiber, near)
        rep.add(Check("fiber_rank", PASS if smin > tol_rank else FAIL, smin, None if smin > tol_rank else wit))
    else:
        rep.add(Check("restriction_to_locus", PASS, 0.0))
        rep.add(Check("fiber_rank", PASS))
    return rep


def verify_extension_chain(d_qp: BundleExtensionDatum, d_rq: BundleExtensionDatum, d_rp: BundleExtensionDatum, pts: np.ndarray, tol_eq: float = TOL["eq"]) -> Check:
    """pi_rq o pi_qp = pi_rp on points of the largest chart p."""
    lhs = d_rq.pi(d_qp.pi(pts))
    rhs = d_rp.pi(pts)
    err = np.linalg.norm(lhs - rhs, axis=1)
    i = int(np.argmax(err)) if len(err) else 0
    return Check.from_residual("extension_chain", err.max(initial=0.0), tol_eq, pts[i] if len(err) else None)
