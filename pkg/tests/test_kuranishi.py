from __future__ import annotations

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vfckit.errors import VfckitError
from vfckit.expr import MapExpr, Y
from vfckit.kuranishi import (
    KuranishiStructure,
    associativity_check,
    normalized_boundary,
    product_and_fiber_product,
    strata,
    sum_chart,
    verify_change,
    verify_structure_cocycle,
)
from vfckit.orbifold import Box

from .conftest import scenario
from .kit import change, chart

y1, y2, y3 = Y(1), Y(2), Y(3)


def g7_pair(s2=(y1, y2), domain=None):
    c1 = chart("c1", [-1], [1], [y1], gc=[y1, 0])
    c2 = chart("c2", [-1, -1], [1, 1], list(s2))
    ch = change("c12", "c1", "c2", [y1, 0], [[1], [0]], 1, domain=domain)
    return {"c1": c1, "c2": c2}, ch


def nested_three(shift=0):
    """Charts of dimension 1, 2, 3 with linear inclusions; ``shift`` spoils Phi_13."""
    c1 = chart("a", [-1], [1], [y1], gc=[y1, 0, 0])
    c2 = chart("b", [-1, -1], [1, 1], [y1, y2], gc=[y1, y2, 0])
    c3 = chart("c", [-1, -1, -1], [1, 1, 1], [y1, y2, y3])
    ch12 = change("ab", "a", "b", [y1, 0], [[1], [0]], 1)
    ch23 = change("bc", "b", "c", [y1, y2, 0], [[1, 0], [0, 1], [0, 0]], 2)
    ch13 = change("ac", "a", "c", [y1 + shift, 0, 0], [[1], [0], [0]], 1)
    return KuranishiStructure({"a": c1, "b": c2, "c": c3}, [ch12, ch23, ch13])


class TestVerifyChange:
    def test_g7_linear_sigma_one(self):
        charts, ch = g7_pair()
        rep = verify_change(ch, charts)
        assert rep.passed
        assert abs(rep.check("normal_derivative").residual - 1.0) < 1e-12

    def test_degenerate_normal_hessian(self):
        charts, ch = g7_pair(s2=(y1, y2 ** 2))
        rep = verify_change(ch, charts)
        c = rep.check("normal_derivative")
        assert c.status == "FAIL" and c.residual == 0.0
        assert np.allclose(c.witness, [0.0])

    def test_weak_versus_strong(self):
        charts, ch = g7_pair(domain=Box((0.2,), (0.9,)))
        strong = verify_change(ch, charts, strong=True)
        weak = verify_change(ch, charts, strong=False)
        assert strong.check("strong_footprint").status == "FAIL"
        assert weak.passed

    def test_incompatible_section(self):
        charts, ch = g7_pair(s2=(2 * y1, y2))
        rep = verify_change(ch, charts)
        assert rep.check("section_compatibility").status == "FAIL"


class TestCocycle:
    def test_g7_vacuous(self):
        rep = verify_structure_cocycle(scenario("G7").structure())
        assert rep.passed and rep.results["triples"] == 0

    def test_nested_linear(self):
        rep = verify_structure_cocycle(nested_three())
        assert rep.results["triples"] == 1
        assert rep.check("cocycle").residual == 0.0

    @pytest.mark.parametrize("shift", [0.01, 0.1, -0.05])
    def test_injected_shift(self, shift):
        rep = verify_structure_cocycle(nested_three(shift), tol=1e-6)
        c = rep.check("cocycle")
        assert c.status == "FAIL"
        assert abs(c.residual - abs(shift)) < 1e-12
        assert c.witness["triple"] == ["a", "b", "c"]


class TestSumChart:
    def test_translation_gluing(self):
        a = chart("a", [-2], [2], [y1])
        b = chart("b", [-2], [2], [y1])
        ch = change("ab", "a", "b", [y1 - 2.5], [[1]], 1, domain=Box((0.5,), (2.0,)), kind="open")
        sc = sum_chart(a, b, ch)
        assert len(sc.pieces) == 2 and sc.footprint().shape[0] == 2

    def test_disjoint(self):
        a = chart("a", [-2], [2], [y1])
        b = chart("b", [-2], [2], [y1], gc=[y1 + 10])
        assert sum_chart(a, b).gluings == []

    def test_dim_mismatch(self):
        with pytest.raises(VfckitError) as e:
            sum_chart(chart("a", [-1], [1], [y1]), chart("b", [-1, -1], [1, 1], [y1, y2]))
        assert e.value.code == "DIM_MISMATCH"


class TestProducts:
    def test_square_times_identity_interval(self):
        sq = chart("N", [0, 0], [1, 1])
        iv = chart("I", [0], [1])
        out = product_and_fiber_product(sq, MapExpr((y2,), 2), iv, MapExpr((y1,), 1))
        assert out.dim == 2 and out.rank == 0

    def test_direct_product_vdim0(self):
        g1 = scenario("G1").charts["U"]
        out = product_and_fiber_product(g1, None, g1, None)
        assert out.vdim == 0
        assert np.allclose(out.zero_samples(), [[0.0, 0.0]])

    def test_constant_maps_not_transversal(self):
        iv = chart("I", [0], [1])
        c = MapExpr((sp.Rational(1, 2),), 1)
        with pytest.raises(VfckitError) as e:
            product_and_fiber_product(iv, c, iv, c)
        assert e.value.code == "NOT_TRANSVERSAL"

    def test_associativity(self):
        a = chart("a", [0], [1])
        b = chart("b", [0, 0], [1, 1])
        c = chart("c", [0], [1])
        chk = associativity_check(a, MapExpr((y1,), 1), b, MapExpr((y1,), 2), MapExpr((y2,), 2), c, MapExpr((y1,), 1))
        assert chk.status == "PASS"


class TestBoundary:
    def test_strip_two_slabs(self):
        bd = normalized_boundary(scenario("G5").charts["U"])
        assert [f[:2] for f in bd.faces] == [(0, "lower"), (0, "upper")]
        assert all(c.dim == 1 for c in bd.charts)
        assert bd.charts[0].orientation == -bd.charts[1].orientation

    def test_half_disk_diameter(self):
        bd = normalized_boundary(scenario("G4").charts["U"])
        assert len(bd.charts) == 1 and bd.charts[0].domain == Box((-2.0,), (2.0,))

    def test_corner_counted_twice(self):
        sq = chart("Q", [0, 0], [1, 1], closed_lower=(True, True), closed_upper=(False, False))
        bd = normalized_boundary(sq)
        assert len(bd.charts) == 2
        assert bd.covering.check("covering_codim2").status == "PASS"
        assert bd.covering.check("covering_codim2").residual == 2.0

    def test_boundary_of_boundary_empty_codim1(self):
        bd = normalized_boundary(scenario("G5").charts["U"])
        for c in bd.charts:
            assert len(normalized_boundary(c).charts) == 0

    def test_strata_of_strip(self):
        s1 = strata(scenario("G5").charts["U"], 1)
        assert set(np.unique(s1["samples"][:, 0])) == {0.0, 1.0}

    @given(st.floats(0.01, 0.99), st.floats(-0.99, 0.99))
    @settings(max_examples=25, deadline=None)
    def test_interior_is_codim0(self, t, y):
        s0 = strata(scenario("G5").charts["U"], 0)
        assert bool(s0["contains"](np.array([t, y]))[0])
