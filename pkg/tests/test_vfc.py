from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vfckit.errors import VfckitError
from vfckit.expr import MapExpr, T, Y
from vfckit.gcs import build_gcs
from vfckit.kuranishi import KuranishiStructure
from vfckit.perturbation import Multisection, MultivaluedPerturbation
from vfckit.vfc import boundary_vanishing_check, level_sweep, solve_zeros_dim0, virtual_chain_dim0

from .conftest import built, mvp, scenario
from .kit import chart

y1 = Y(1)


def hand_mvp(gcs, *branches):
    p = gcs.pieces()[0]
    return MultivaluedPerturbation({p: Multisection(p, tuple(MapExpr((sp.sympify(b),), 1) for b in branches))})


class TestHandPerturbations:
    def test_g1_shift(self):
        gcs = built("G1")[0]
        z = solve_zeros_dim0(gcs, hand_mvp(gcs, y1 - T), 10)
        assert len(z.points) == 1
        assert z.points[0].y[0] == pytest.approx(0.1, abs=1e-12)
        assert z.total == 1

    def test_g2_odd_branch_at_fixed_point(self):
        gcs = built("G2")[0]
        z = solve_zeros_dim0(gcs, hand_mvp(gcs, y1), 10)
        (p,) = z.points
        assert p.stabilizer_order == 2 and p.multiplicity == Fraction(1, 2)

    @given(st.integers(5, 90))
    @settings(max_examples=15, deadline=None)
    def test_g2_swap_pair(self, k):
        a = sp.Rational(k, 100)
        gcs = built("G2")[0]
        z = solve_zeros_dim0(gcs, hand_mvp(gcs, y1 - a, y1 + a), 10, delta_U=1.0)
        # the zeros at a and -a form one orbit with trivial stabilizer
        (p,) = z.points
        assert p.stabilizer_order == 1 and p.ell == 2
        assert z.total == Fraction(1, 2)

    def test_opposite_signs_cancel(self):
        gcs = built("G1")[0]
        z = solve_zeros_dim0(gcs, hand_mvp(gcs, y1 - T, -y1 - T, y1 + T), 10)
        assert z.total == Fraction(1, 3)

    def test_reversed_orientation(self):
        c = chart("U", [-1], [1], [y1], orientation=-1)
        gcs = build_gcs(KuranishiStructure({"U": c}))[0]
        assert solve_zeros_dim0(gcs, hand_mvp(gcs, y1 - T), 10).total == -1

    def test_degenerate_branch(self):
        gcs = built("G1")[0]
        with pytest.raises(VfckitError) as e:
            solve_zeros_dim0(gcs, hand_mvp(gcs, 0 * y1 + sp.Integer(0)), 10)
        assert e.value.code == "SIGN_UNDETERMINED"

    def test_zero_outside_neighbourhood_is_clipped(self):
        gcs = built("G1")[0]
        z = solve_zeros_dim0(gcs, hand_mvp(gcs, y1 - 5 * T), 10, delta_U=0.1)
        assert z.points == [] and z.total == 0


EXPECTED = {"G1": Fraction(1), "G2": Fraction(1, 2), "G3(n=2)": Fraction(1), "G3(n=3)": Fraction(2, 3)}


class TestCounts:
    @pytest.mark.parametrize("name", list(EXPECTED))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("n", [50, 100])
    def test_exact(self, name, seed, n):
        chain, rep = virtual_chain_dim0(built(name)[0], mvp(name, seed), n)
        assert chain.total == EXPECTED[name]
        assert rep.check("support_independence").status == "PASS"
        assert len(set(rep.results["totals_by_support"].values())) == 1

    @pytest.mark.parametrize("name", list(EXPECTED))
    def test_delta_halving(self, name):
        a, _ = virtual_chain_dim0(built(name)[0], mvp(name), 100, delta_U=0.1)
        b, _ = virtual_chain_dim0(built(name)[0], mvp(name), 100, delta_U=0.05)
        assert a.total == b.total

    def test_provenance(self):
        chain, _ = virtual_chain_dim0(built("G2")[0], mvp("G2", 7), 100, scenario="G2")
        d = chain.to_dict()
        assert d["total"] == "1/2" and d["provenance"]["seed"] == 7

    def test_wrong_dimension(self):
        with pytest.raises(VfckitError) as e:
            solve_zeros_dim0(built("G4")[0], mvp("G4"), 100)
        assert e.value.code == "NOT_VDIM0"


class TestBoundary:
    @pytest.mark.parametrize("name", ["G4", "G5"])
    @pytest.mark.parametrize("seed", [0, 3])
    def test_vanishes(self, name, seed):
        rep = boundary_vanishing_check(built(name)[0], mvp(name, seed), 50)
        assert rep.passed and rep.results["total"] == 0

    def test_g4_boundary_has_two_cancelling_points(self):
        rep = boundary_vanishing_check(built("G4")[0], mvp("G4"), 50)
        pts = rep.results["zeros"]["points"]
        assert len(pts) == 2
        assert sorted(Fraction(p["multiplicity"]) for p in pts) == [-1, 1]

    def test_needs_vdim1(self):
        with pytest.raises(VfckitError) as e:
            boundary_vanishing_check(built("G1")[0], mvp("G1"), 50)
        assert e.value.code == "COMMAND_SCENARIO_MISMATCH"


class TestSweep:
    def test_g4(self):
        sc = scenario("G4")
        rep = level_sweep(built("G4")[0], mvp("G4"), 100, sc.setting("sweep"), sc.setting("levels"), above=sc.setting("above"))
        assert rep.passed
        assert rep.results["regular_levels"] == 8
        totals = {v["total"] for k, v in rep.results["levels"].items() if k != "1.5"}
        assert len(totals) == 1
        assert rep.results["levels"]["1.5"]["points"] == 0
        # one critical value near the top of the arc
        assert rep.results["critical_values"][0] == pytest.approx(1.0, abs=0.01)

    def test_critical_level_skipped(self):
        sc = scenario("G4")
        crit = level_sweep(built("G4")[0], mvp("G4"), 100, sc.setting("sweep"), [0.5]).results["critical_values"][0]
        rep = level_sweep(built("G4")[0], mvp("G4"), 100, sc.setting("sweep"), [0.5, crit])
        chk = rep.check("critical_levels_skipped")
        assert chk.detail == "LEVEL_CRITICAL" and chk.witness == [crit]
