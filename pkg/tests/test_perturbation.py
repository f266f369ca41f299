from __future__ import annotations

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vfckit.expr import MapExpr, T, W, Y
from vfckit.orbifold import Ball, Box
from vfckit.perturbation import (
    CFPerturbation,
    Multisection,
    build_multivalued_perturbation,
    c1_convergence,
    check_transversality,
    equivalent,
    extend_multisection,
    hausdorff_to_X,
    omega_density,
    standard_cfp,
    sum_cfp,
    verify_cfp,
    verify_mvp_compatibility,
    verify_multisection,
)

from .conftest import built, cfps, mvp, scenario
from .kit import chart

y1, y2 = Y(1), Y(2)
third = sp.Rational(3, 10)


def g2_chart():
    gcs = built("G2")[0]
    return gcs.charts[gcs.pieces()[0]]


def ms(label, *branches):
    return Multisection(label, tuple(MapExpr((sp.sympify(b),), 1) for b in branches))


class TestMultisection:
    def test_swap_pair_is_equivariant(self):
        c = g2_chart()
        rep = verify_multisection(ms(c.label, y1 - third, y1 + third), c)
        assert rep.passed
        # the nontrivial element swaps the two branches
        assert rep.results["permutations"][1] == [1, 0]

    @pytest.mark.parametrize(
        "branches",
        [
            (y1 - third,),
            (y1 - third, y1 + sp.Rational(2, 5)),
            (y1 - T, y1 + 2 * T),
        ],
        ids=["single_shift", "asymmetric_pair", "t_asymmetric_pair"],
    )
    def test_defects_have_witness(self, branches):
        c = g2_chart()
        rep = verify_multisection(ms(c.label, *branches), c)
        chk = rep.check("equivariance_up_to_permutation")
        assert chk.status == "FAIL" and chk.detail == "NO_PERMUTATION_FOUND"
        assert chk.witness["element"] == 1
        # the witness point really has no matching permutation
        p = np.atleast_2d(chk.witness["point"])
        t = chk.witness["t"]
        m = ms(c.label, *branches)
        moved = np.sort(m.values(-p, t)[:, 0, 0])
        rhs = np.sort(-m.values(p, t)[:, 0, 0])
        assert np.abs(moved - rhs).max() > 1e-6

    def test_iteration_is_equivalent(self):
        m = ms("U", y1 - third, y1 + third)
        pts = np.linspace(-1, 1, 9)[:, None]
        assert equivalent(m, m.iterate(3), pts, 0.1)
        assert not equivalent(m, ms("U", y1 - third), pts, 0.1)

    def test_restrict_face(self):
        m = Multisection("U", (MapExpr((y1 + 2 * y2,), 2),))
        face = m.restrict_face(chart("U", [0, 0], [1, 1], [y1 + y2]), (0, "lower", 0.0))
        assert sp.simplify(face.branches[0].exprs[0] - 2 * y1) == 0


class TestExtension:
    def test_g7_extension(self):
        gcs = built("G7", "two")[0]
        datum = gcs.extension_data[("c1", "c2")]
        src, dst = gcs.charts["c1"], gcs.charts["c2"]
        out = extend_multisection(ms("c1", y1 - sp.Rational(1, 10)), src.s, dst.s, datum, "c2")
        e = out.branches[0].exprs
        assert sp.simplify(e[0] - (y1 - sp.Rational(1, 10))) == 0
        assert sp.simplify(e[1] - y2) == 0

    def test_missing_datum(self):
        from vfckit.errors import VfckitError

        c = chart("c", [-1], [1], [y1])
        with pytest.raises(VfckitError) as e:
            extend_multisection(ms("c", y1), c.s, c.s, None, "d")
        assert e.value.code == "MISSING_EXTENSION_DATA"


class TestTransversality:
    def test_g4_circle_near_unit_radius(self):
        gcs = built("G4")[0]
        c = gcs.charts[gcs.pieces()[0]]
        r = lambda p: np.abs(np.linalg.norm(p, axis=1) - 1) < 0.5
        tr = check_transversality([c.s], c, region=r, region_name="annulus")
        assert tr.transversal and tr.sigma_min >= 1.0
        assert tr.sigma_min_region >= 1.0 - 1e-12

    def test_degenerate_zero(self):
        c = chart("c", [-1], [1], [y1 ** 2])
        tr = check_transversality([c.s], c)
        assert not tr.transversal
        assert abs(tr.witness[0]) < 1e-3

    def test_strong_submersivity(self):
        c = chart("c", [-1, -1], [1, 1], [y1])
        ok = check_transversality([c.s], c, f=MapExpr((y2,), 2))
        bad = check_transversality([c.s], c, f=MapExpr((y1,), 2))
        assert ok.strongly_submersive and not bad.strongly_submersive


class TestMultivalued:
    @pytest.mark.parametrize("name", ["G1", "G2", "G3(n=3)", "G7"])
    def test_seed_determinism(self, name):
        gcs = built(name)[0]
        a = build_multivalued_perturbation(gcs, seed=3).serialize()
        b = build_multivalued_perturbation(gcs, seed=3).serialize()
        assert a == b

    def test_seeds_differ(self):
        gcs = built("G1")[0]
        assert build_multivalued_perturbation(gcs, seed=0).serialize() != build_multivalued_perturbation(gcs, seed=1).serialize()

    @pytest.mark.parametrize("name", ["G2", "G3(n=2)", "G3(n=3)"])
    def test_branches_equivariant(self, name):
        gcs = built(name)[0]
        m = mvp(name)
        for p in gcs.pieces():
            assert verify_multisection(m.at(p), gcs.charts[p]).passed

    def test_g7_compatible(self):
        gcs = built("G7", "two")[0]
        rep = verify_mvp_compatibility(gcs, mvp("G7", 0, "two"))
        assert rep.passed and rep.check("chart_compatibility").residual < 1e-12

    def test_c1_convergence_rate(self):
        gcs = built("G1")[0]
        c = gcs.charts[gcs.pieces()[0]]
        gaps = c1_convergence(c, mvp("G1").at(c.label), [10, 100, 1000])
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[1] == pytest.approx(gaps[0] / 10, rel=1e-9)


class TestCFPerturbation:
    @pytest.mark.parametrize("name", ["G1", "G2", "G3(n=2)", "G4", "G5", "G7"])
    def test_omega_mass(self, name):
        gcs = built(name)[0]
        sysm = cfps(name)
        for p in gcs.pieces():
            rep = verify_cfp(sysm[p], gcs.charts[p])
            assert abs(rep.results["omega_mass"] - 1.0) <= 1e-10
            assert rep.passed

    @pytest.mark.parametrize("power", [2, 4, 6])
    def test_disk_density(self, power):
        dom = Ball((0.0, 0.0), 1.0)
        dens = omega_density(dom, power)
        r = sp.Symbol("r", positive=True)
        th = sp.Symbol("th")
        polar = dens.subs({W(1): r * sp.cos(th), W(2): r * sp.sin(th)})
        mass = sp.integrate(sp.integrate(sp.simplify(polar) * r, (r, 0, 1)), (th, 0, 2 * sp.pi))
        assert sp.simplify(mass - 1) == 0

    def _g2(self):
        c = g2_chart()
        return c, standard_cfp(c)

    def test_unnormalized_omega(self):
        c, cfp = self._g2()
        bad = CFPerturbation(cfp.chart, cfp.W, cfp.action, 2 * cfp.omega, cfp.s)
        chk = verify_cfp(bad, c).check("omega_normalized")
        assert chk.status == "FAIL" and abs(chk.residual - 1.0) < 1e-10
        assert chk.detail == "OMEGA_NOT_NORMALIZED"

    def test_wrong_parameter_action(self):
        c, cfp = self._g2()
        bad = CFPerturbation(cfp.chart, cfp.W, [np.eye(1), np.eye(1)], cfp.omega, cfp.s)
        chk = verify_cfp(bad, c).check("equivariance")
        assert chk.status == "FAIL" and chk.witness["element"] == 1
        w, e = chk.witness["w"], chk.witness["eps"]
        # with the trivial action on W the defect is exactly 2 eps |w|
        assert chk.residual == pytest.approx(2 * e * abs(w[0]), rel=1e-9)

    def test_signed_omega(self):
        c, cfp = self._g2()
        bad = CFPerturbation(cfp.chart, cfp.W, cfp.action, cfp.omega * (1 + 3 * W(1)), cfp.s)
        rep = verify_cfp(bad, c)
        assert rep.check("omega_nonnegative").status == "FAIL"
        assert rep.check("omega_invariance").status == "FAIL"

    @given(st.floats(-0.9, 0.9), st.floats(0.01, 0.5), st.floats(0.0, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_sum_formula(self, y, eps, chi):
        base = MapExpr((y1,), 1)
        c = chart("c", [-1], [1], [y1])
        term = standard_cfp(c)
        chi_e = sp.nsimplify(chi, rational=True)
        out = sum_cfp(base, [(term, chi_e, None, None, base)], "c", 1)
        assert out.wdim == 1
        w = 0.37
        got = out.s(np.array([[y]]), np.array([w]), eps)[0, 0]
        assert got == pytest.approx(y - float(chi_e) * eps * w, abs=1e-12)

    def test_g7_system(self):
        gcs = built("G7", "two")[0]
        sysm, rep = __import__("vfckit.perturbation", fromlist=["x"]).build_cfp_system(gcs)
        assert rep.passed
        assert sysm["c1"].wdim == 1 and sysm["c2"].wdim == 3
        for p in gcs.pieces():
            assert verify_cfp(sysm[p], gcs.charts[p]).passed


class TestHausdorff:
    @pytest.mark.parametrize("name,per_dim", [("G1", 24), ("G4", 12)])
    def test_decreasing(self, name, per_dim):
        gcs = built(name)[0]
        p = gcs.pieces()[0]
        cfp = cfps(name)[p]
        wpts, _ = cfp.w_rule(8)
        d = [hausdorff_to_X(gcs.charts[p], cfp.s, e, wpts, per_dim) for e in (0.2, 0.1, 0.05)]
        assert d[0] > d[1] > d[2]
        assert d[2] < 0.05

    def test_g1_is_linear_in_eps(self):
        gcs = built("G1")[0]
        p = gcs.pieces()[0]
        cfp = cfps("G1")[p]
        wpts, _ = cfp.w_rule(8)
        c = gcs.charts[p]
        d1, d2 = (hausdorff_to_X(c, cfp.s, e, wpts) for e in (0.1, 0.05))
        # zeros sit at eps * w, so d_H is eps times the largest |w| node
        assert d1 == pytest.approx(0.1 * np.abs(wpts).max(), rel=1e-6)
        assert d2 == pytest.approx(d1 / 2, rel=1e-6)
