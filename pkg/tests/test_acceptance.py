"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS`` or ``criterion N: FAIL``
line (shown even without ``-s``) and then asserts the same outcome.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp

from vfckit.cli import run
from vfckit.expr import MapExpr, Y
from vfckit.gcs import EmbeddingRecord, GoodCoordinateSystem, identity_map, verify_embedding_record, verify_gcs_axioms
from vfckit.integrate import form_on_chart, stokes_check
from vfckit.kuranishi import KuranishiStructure, verify_structure_cocycle
from vfckit.orbifold import Box
from vfckit.perturbation import hausdorff_to_X, standard_cfp, verify_cfp, verify_multisection
from vfckit.vfc import boundary_vanishing_check, level_sweep, virtual_chain_dim0

from .conftest import built, cfps, mvp, scenario
from .kit import change, chart

y1, y2, y3 = Y(1), Y(2), Y(3)

GALLERY = ["G1", "G2", "G3(n=2)", "G3(n=3)", "G3(n=4)", "G4", "G5", "G6", "G7"]
COUNTS = {"G1": Fraction(1), "G2": Fraction(1, 2), "G3(n=2)": Fraction(1), "G3(n=3)": Fraction(2, 3)}
SEEDS = (0, 1, 2)


def presentations(name):
    return list(scenario(name).presentations) or [""]


def announce(capsys, number, failures, detail=""):
    status = "PASS" if not failures else "FAIL"
    with capsys.disabled():
        extra = f" ({detail})" if detail and not failures else ""
        print(f"\ncriterion {number}: {status}{extra}")
        for f in failures:
            print(f"    {f}")
    assert not failures, failures


def test_criterion_1_counts(capsys):
    failures = []
    for name, expected in COUNTS.items():
        for seed in SEEDS:
            for n in (50, 100):
                chain, _ = virtual_chain_dim0(built(name)[0], mvp(name, seed), n)
                if chain.total != expected:
                    failures.append(f"{name} seed={seed} n={n}: {chain.total} != {expected}")
    announce(capsys, 1, failures, "G1=1, G2=1/2, G3(2)=1, G3(3)=2/3 over 3 seeds and n in {50, 100}")


def test_criterion_2_independence(capsys):
    failures = []
    for name in COUNTS:
        gcs = built(name)[0]
        seen = set()
        for seed in SEEDS:
            _, rep = virtual_chain_dim0(gcs, mvp(name, seed), 100, supports=("Kprime", "K2prime"))
            by_support = set(rep.results["totals_by_support"].values())
            if len(by_support) != 1:
                failures.append(f"{name} seed={seed}: support systems disagree {by_support}")
            seen |= by_support
            half, _ = virtual_chain_dim0(gcs, mvp(name, seed), 100, delta_U=0.05)
            seen.add(half.total)
        if len(seen) != 1:
            failures.append(f"{name}: counts differ across seeds, supports or neighbourhood halving: {seen}")
    announce(capsys, 2, failures, "seeds, K1 vs K2 and halved neighbourhood agree exactly")


def test_criterion_3_boundary_and_sweep(capsys):
    failures = []
    for name in ("G4", "G5"):
        for seed in range(5):
            rep = boundary_vanishing_check(built(name)[0], mvp(name, seed), 50)
            if rep.results["total"] != 0:
                failures.append(f"boundary {name} seed={seed}: {rep.results['total']}")
    sc = scenario("G4")
    levels = sc.setting("levels")
    rep = level_sweep(built("G4")[0], mvp("G4"), 100, sc.setting("sweep"), levels, above=sc.setting("above"))
    if rep.results["regular_levels"] != 8 or len(levels) != 8:
        failures.append(f"sweep G4: {rep.results['regular_levels']} regular levels")
    if rep.check("constant_across_levels").status != "PASS":
        failures.append(f"sweep G4 not constant: {rep.check('constant_across_levels').witness}")
    if rep.check("empty_above_max").status != "PASS":
        failures.append("sweep G4 not empty above the maximum")
    announce(capsys, 3, failures, "boundary chains 0 for 5 seeds; sweep constant on 8 levels, empty above")


def test_criterion_4_stokes(capsys):
    failures = []
    for name in ("G5", "G4"):
        gcs = built(name)[0]
        spec = scenario(name).forms[scenario(name).setting("stokes_form")]
        h = form_on_chart(spec.form, gcs.charts[gcs.pieces()[0]], spec.chart)
        rep = stokes_check(gcs, cfps(name), h, [0.1, 0.05], q=16, q_low=8, tol=1e-6)
        for row in rep.results["ladder"]:
            e = row["epsilon"]
            if not row["residual"] <= 1e-6:
                failures.append(f"{name} eps={e}: residual {row['residual']:.3e}")
            if not row["residual_low_order"] >= 10 * row["residual"]:
                failures.append(f"{name} eps={e}: order 8 residual {row['residual_low_order']:.3e} not 10x order 16 residual {row['residual']:.3e}")
        for c in rep.checks:
            if c.name.startswith("endpoint_match") and c.status != "PASS":
                failures.append(f"{name} {c.name}: {c.residual}")
    announce(capsys, 4, failures, "residual <= 1e-6 at eps 0.1 and 0.05, >= 10x drop from order 8 to 16")


def test_criterion_5_compose(capsys):
    failures = []
    rep = run("compose", "gallery:G6", {"tol": 1e-8})
    rows = [r for r in rep.results["rows"] if r["layer"] == "correspondence"]
    if len(rows) < 3:
        failures.append(f"only {len(rows)} integrand pairs")
    for r in rows:
        if abs(r["direct"] - r["iterated"]) > 1e-8:
            failures.append(f"pair {r['h']},{r['rho']}: gap {abs(r['direct'] - r['iterated']):.3e}")
    oracles = {round(r["expected"], 12) for r in rows}
    for value in (0.5, round(1 / 3, 12)):
        if value not in oracles:
            failures.append(f"oracle {value} missing")
    for r in rows:
        if abs(r["direct"] - r["expected"]) > 1e-8:
            failures.append(f"pair {r['h']},{r['rho']}: {r['direct']} vs oracle {r['expected']}")
    if not rep.passed:
        failures += [f"{c.name}: {c.residual}" for c in rep.failures()]
    announce(capsys, 5, failures, "3 pairs, gaps <= 1e-8, oracles 1/2 and 1/3")


def test_criterion_6_invariance(capsys):
    failures = []
    rep = run("invariance", "gallery:G7", {})
    for c in rep.checks:
        if c.name.startswith("count_equal") and c.status != "PASS":
            failures.append(f"{c.name}: {c.witness}")
        if c.name.startswith("pushout_gap") and not (c.residual is not None and c.residual <= 1e-6):
            failures.append(f"{c.name}: {c.residual}")
        if c.name.startswith(("KG", "GG")):
            if c.status != "PASS" or (c.residual is not None and c.residual > 1e-8):
                failures.append(f"{c.name}: {c.status} {c.residual}")
    names = [c.name for c in rep.checks]
    for prefix in ("count_equal", "pushout_gap", "KG[", "GG."):
        if not any(n.startswith(prefix) for n in names):
            failures.append(f"no {prefix} check reported")
    announce(capsys, 6, failures, "counts equal, pushout gap <= 1e-6, KG and GG residuals <= 1e-8")


def test_criterion_7_hausdorff(capsys):
    failures = []
    for name in ("G1", "G4"):
        gcs = built(name)[0]
        p = gcs.pieces()[0]
        cfp = cfps(name)[p]
        wpts, _ = cfp.w_rule(8)
        d = [hausdorff_to_X(gcs.charts[p], cfp.s, e, wpts, 24) for e in (0.2, 0.1, 0.05)]
        if not (d[0] > d[1] > d[2]):
            failures.append(f"{name}: not strictly decreasing {d}")
        if not d[2] < 0.05:
            failures.append(f"{name}: d_H(0.05) = {d[2]}")
    announce(capsys, 7, failures, "strictly decreasing, d_H(0.05) < 0.05 for G1 and G4")


def _build_json(command, name, threads):
    code = "from vfckit.cli import run, report_json; import sys; print(report_json(run(sys.argv[1], sys.argv[2], {}), with_time=False))"
    env = dict(os.environ, VFCKIT_THREADS=threads)
    out = subprocess.run([sys.executable, "-c", code, command, f"gallery:{name}"], env=env, capture_output=True, text=True)
    return out.returncode, out.stdout


def test_criterion_8_hygiene(capsys):
    failures = []
    for name in GALLERY:
        sc = scenario(name)
        for pr in presentations(name):
            gcs = built(name, pr)[0]
            system = cfps(name, pr)
            for p in gcs.pieces():
                mass = verify_cfp(system[p], gcs.charts[p]).results["omega_mass"]
                if abs(mass - 1.0) > 1e-10:
                    failures.append(f"{name}[{pr}] {p}: omega mass {mass!r}")
                ms_rep = verify_multisection(mvp(name, 0, pr).at(p), gcs.charts[p])
                if not ms_rep.passed:
                    failures.append(f"{name}[{pr}] {p}: multisection {ms_rep.check('equivariance_up_to_permutation').witness}")
        for label, c in sc.charts.items():
            if c.rank:
                mass = verify_cfp(standard_cfp(c), c).results["omega_mass"]
                if abs(mass - 1.0) > 1e-10:
                    failures.append(f"{name} chart {label}: standard omega mass {mass!r}")
    for command, name in (("build-gcs", "G7"), ("perturb", "G3(n=3)"), ("perturb", "G7"), ("count", "G2")):
        runs = [_build_json(command, name, t) for t in ("1", "8")]
        if runs[0][0] != 0 or runs[0] != runs[1]:
            failures.append(f"{command} {name}: output differs between VFCKIT_THREADS 1 and 8")
    announce(capsys, 8, failures, "omega mass 1 +- 1e-10, multisections equivariant, byte-identical under 1 and 8 threads")


# -- structural checks and injected defects ---------------------------------------


def _nested_three(phi13, fiber13=((1,), (0,), (0,))):
    c1 = chart("a", [-1], [1], [y1], gc=[y1, 0, 0])
    c2 = chart("b", [-1, -1], [1, 1], [y1, y2], gc=[y1, y2, 0])
    c3 = chart("c", [-1, -1, -1], [1, 1, 1], [y1, y2, y3])
    ch12 = change("ab", "a", "b", [y1, 0], [[1], [0]], 1)
    ch23 = change("bc", "b", "c", [y1, y2, 0], [[1, 0], [0, 1], [0, 0]], 2)
    ch13 = change("ac", "a", "c", phi13, [list(r) for r in fiber13], 1)
    return KuranishiStructure({"a": c1, "b": c2, "c": c3}, [ch12, ch23, ch13])


def _cocycle_defects():
    """(description, structure, expected residual) with a known defect."""
    return [
        ("shifted Phi_13", _nested_three([y1 + sp.Rational(1, 20), 0, 0]), 0.05),
        ("reflected Phi_13", _nested_three([-y1, 0, 0]), None),
        ("scaled fiber map", _nested_three([y1, 0, 0], ((2,), (0,), (0,))), 1.0),
    ]


def _axiom_defects():
    same = {"a": chart("a", [-1], [1], [y1]), "b": chart("b", [-1], [1], [y1])}
    unordered = GoodCoordinateSystem(same, {"a": ["a"], "b": ["b"]})
    c1 = chart("c1", [-1], [1], [y1], gc=[y1, 0])
    c2 = chart("c2", [-1, -1], [1, 1], [y1, y2])
    fold = change("fold", "c1", "c2", [y1 ** 2, 0], [[1], [0]], 1)
    folded = GoodCoordinateSystem({"c1": c1, "c2": c2}, {"c1": ["c1"], "c2": ["c2"]}, {("c1", "c2")}, [fold])
    g7 = built("G7", "two")[0]
    cyclic = GoodCoordinateSystem(g7.charts, g7.nodes, {("c1", "c2"), ("c2", "c1")}, g7.changes)
    gap = GoodCoordinateSystem({"U": chart("U", [-2], [2], [y1])}, {"U": ["U"]}, K={"U": Box((0.5,), (1.5,))})
    return [
        ("same-dimension charts left unordered", unordered, "comparability", lambda w: w["nodes"] == ["a", "b"]),
        ("gluing folds y to y^2", folded, "hausdorff", lambda w: abs(w["points"][0][0] + w["points"][1][0]) < 1e-12),
        ("order with a cycle", cyclic, "partial_order", lambda w: w["reason"] == "not antisymmetric"),
        ("supports miss part of X", gap, "support_covering", lambda w: np.allclose(w["point"], [0.0])),
    ]


def _embedding_defects():
    gcs, rec, _ = built("G7", "two")
    maps = dict(rec.maps)
    maps["c1"] = type(maps["c1"])("c1", MapExpr((y1 + sp.Rational(1, 10),), 1), maps["c1"].hom, maps["c1"].fiber)
    shifted = EmbeddingRecord("KG", rec.src_charts, rec.dst_charts, maps, rec.src_changes, rec.dst_changes)
    ident = {p: identity_map(gcs.charts[p]) for p in gcs.pieces()}
    reversed_ = EmbeddingRecord("GG", gcs.charts, gcs.charts, ident, gcs.changes, gcs.changes, {"c1": "c2", "c2": "c1"}, gcs.order, gcs.order)
    small = identity_map(gcs.charts["c2"], "c2", Box((-0.3, -0.3), (0.3, 0.3)))
    narrow = EmbeddingRecord("GK", gcs.charts, gcs.charts, {"c2": small}, src_support={"c2": gcs.K["c2"]})
    return [
        ("KG map shifted by 1/10", shifted, "commuting_squares", lambda c: abs(c.residual - 0.1) < 1e-12),
        ("GG node map reverses the order", reversed_, "order_preserving", lambda c: True),
        ("GK domain smaller than the support", narrow, "support_in_domain", lambda c: c.witness["chart"] == "c2"),
    ]


def test_criterion_9_structure(capsys):
    failures = []
    for name in GALLERY:
        sc = scenario(name)
        coc = verify_structure_cocycle(sc.structure(), tol=1e-8)
        if not coc.passed:
            failures.append(f"{name}: cocycle residual {coc.check('cocycle').residual}")
        for pr in presentations(name):
            gcs, rec, _ = built(name, pr)
            for rep in (verify_gcs_axioms(gcs), verify_embedding_record(rec)):
                for c in rep.checks:
                    if c.status != "PASS" or (c.name != "comparability" and c.residual is not None and c.residual >= 1e-8):
                        failures.append(f"{name}[{pr}] {rep.name}.{c.name}: {c.status} {c.residual}")
    for desc, ks, expected in _cocycle_defects():
        c = verify_structure_cocycle(ks, tol=1e-8).check("cocycle")
        ok = c.status == "FAIL" and c.witness["triple"] == ["a", "b", "c"]
        if expected is not None:
            ok &= abs(c.residual - expected) < 1e-12
        if not ok:
            failures.append(f"cocycle defect '{desc}' not caught: {c}")
    for desc, gcs, check, witness_ok in _axiom_defects():
        c = verify_gcs_axioms(gcs).check(check)
        if c.status != "FAIL" or not witness_ok(c.witness):
            failures.append(f"axiom defect '{desc}' not caught by {check}: {c}")
    for desc, rec, check, witness_ok in _embedding_defects():
        c = verify_embedding_record(rec).check(check)
        if c.status != "FAIL" or not witness_ok(c):
            failures.append(f"embedding defect '{desc}' not caught by {check}: {c}")
    announce(capsys, 9, failures, "gallery structural checks pass; 3+ injected defects per checker caught with witnesses")
