from __future__ import annotations

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vfckit.errors import VfckitError
from vfckit.expr import MapExpr, Y
from vfckit.numerics import gl_interval
from vfckit.orbifold import (
    Ball,
    Box,
    DifferentialForm,
    FiniteGroupAction,
    OrbifoldAtlas,
    OrbifoldChart,
    Transition,
    form_calculus,
    integrate_top_form,
    local_representative,
    partition_of_unity,
    stabilizer,
    verify_chart,
)

from .conftest import scenario

SIGN = FiniteGroupAction([[[1.0]], [[-1.0]]])


def rotation_group(n: int) -> FiniteGroupAction:
    mats = [[[np.cos(2 * np.pi * k / n), -np.sin(2 * np.pi * k / n)], [np.sin(2 * np.pi * k / n), np.cos(2 * np.pi * k / n)]] for k in range(n)]
    return FiniteGroupAction(mats)


def line_chart(label="U", group=None):
    return OrbifoldChart(label, Box((-2.0,), (2.0,)), group or FiniteGroupAction.trivial(1))


class TestGroups:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
    def test_rotation_groups_pass_axioms(self, n):
        res = rotation_group(n).axiom_residuals()
        assert max(res.values()) < 1e-10

    def test_missing_inverse_detected(self):
        g = FiniteGroupAction([[[1.0, 0], [0, 1]], [[0, -1.0], [1, 0]]])
        res = g.axiom_residuals()
        assert res["closure"] > 0.5

    def test_empty_group_rejected(self):
        with pytest.raises(VfckitError) as e:
            FiniteGroupAction([])
        assert e.value.code == "EMPTY_GROUP"

    def test_non_square_rejected(self):
        with pytest.raises(VfckitError) as e:
            FiniteGroupAction([[[1.0, 0.0]]])
        assert e.value.code == "MALFORMED_MATRIX"


class TestVerifyChart:
    @pytest.mark.parametrize("name", ["G1", "G2", "G3(n=2)", "G3(n=3)", "G3(n=4)", "G4", "G5", "G6", "G7"])
    def test_gallery_charts_verify(self, name):
        for ch in scenario(name).charts.values():
            assert verify_chart(ch.base).passed

    def test_non_effective_action_fails(self):
        # an element acting as the identity makes the action non-effective
        g = FiniteGroupAction([[[1.0]], [[1.0]]])
        rep = verify_chart(line_chart(group=g))
        assert rep.check("effectivity").status == "FAIL"

    def test_domain_not_invariant_fails(self):
        ch = OrbifoldChart("U", Box((-1.0,), (2.0,)), SIGN, (0.0,))
        rep = verify_chart(ch)
        assert rep.check("domain_invariance").status == "FAIL"

    def test_base_point_not_fixed_fails(self):
        ch = OrbifoldChart("U", Box((-2.0,), (2.0,)), SIGN, (0.5,))
        assert verify_chart(ch).check("base_point_fixed").status == "FAIL"


class TestStabilizer:
    def test_origin_full_group(self):
        _, idx = stabilizer(scenario("G2").charts["U"].base, [0.0])
        assert idx == [0, 1]

    def test_free_orbit_trivial(self):
        _, idx = stabilizer(scenario("G2").charts["U"].base, [0.7])
        assert idx == [0]

    def test_spindle_off_axis_trivial(self):
        _, idx = stabilizer(scenario("G3(n=3)").charts["N"].base, [0.5, 0.0])
        assert idx == [0]

    def test_outside_domain(self):
        with pytest.raises(VfckitError) as e:
            stabilizer(scenario("G2").charts["U"].base, [5.0])
        assert e.value.code == "POINT_OUTSIDE_DOMAIN"

    @given(st.floats(min_value=-1.9, max_value=1.9).filter(lambda v: abs(v) > 1e-6))
    @settings(max_examples=30, deadline=None)
    def test_nonzero_points_are_free(self, x):
        _, idx = stabilizer(scenario("G2").charts["U"].base, [x])
        assert idx == [0]


class TestLocalRepresentative:
    def _g7_atlas(self):
        c1 = OrbifoldChart("c1", Box((-1.0,), (1.0,)), FiniteGroupAction.trivial(1))
        c2 = OrbifoldChart("c2", Box((-1.0, -1.0), (1.0, 1.0)), FiniteGroupAction.trivial(2))
        tr = Transition("c1", "c2", (0,), MapExpr((Y(1), sp.Integer(0)), 1))
        gc = {"c1": lambda p: np.hstack([p, np.zeros((len(p), 1))])}
        return OrbifoldAtlas({"c1": c1, "c2": c2}, [tr], gc)

    def test_stored_transition(self):
        hom, phi = local_representative(self._g7_atlas(), "c1", "c2", [0.3])
        assert hom == (0,)
        assert np.allclose(phi.at(np.array([0.3])), [0.3, 0.0])

    def test_mu_canonicalization(self):
        ch = OrbifoldChart("U", Box((-2.0,), (2.0,)), SIGN, (0.0,))
        flipped = Transition("U", "U", (0, 1), MapExpr((-Y(1),), 1))
        atlas = OrbifoldAtlas({"U": ch}, [flipped])
        hom, phi = local_representative(atlas, "U", "U", [0.7])
        assert np.allclose(phi.at(np.array([0.7])), [0.7])

    def test_disjoint_charts(self):
        a = OrbifoldChart("a", Box((0.0,), (1.0,)), FiniteGroupAction.trivial(1))
        b = OrbifoldChart("b", Box((5.0,), (6.0,)), FiniteGroupAction.trivial(1))
        with pytest.raises(VfckitError) as e:
            local_representative(OrbifoldAtlas({"a": a, "b": b}), "a", "b", [0.5])
        assert e.value.code == "NOT_IN_OVERLAP"


class TestForms:
    def test_d_of_square(self):
        d = form_calculus("exterior_derivative", DifferentialForm.function(1, Y(1) ** 2))
        assert sp.simplify(d.coefficient((0,)) - 2 * Y(1)) == 0

    def test_wedge_self_zero(self):
        dy = DifferentialForm.make(1, 1, {(0,): 1})
        assert form_calculus("wedge", dy, dy).is_zero()

    def test_pullback_dz_constant_coordinate(self):
        dz = DifferentialForm.make(2, 1, {(1,): 1})
        assert form_calculus("pullback", dz, MapExpr((Y(1), sp.Integer(0)), 1)).is_zero()

    def test_degree_overflow(self):
        with pytest.raises(VfckitError) as e:
            DifferentialForm.make(1, 2, {})
        assert e.value.code == "DEGREE_OVERFLOW"

    def test_wedge_anticommutes(self):
        a = DifferentialForm.make(2, 1, {(0,): Y(2)})
        b = DifferentialForm.make(2, 1, {(1,): Y(1)})
        assert (a.wedge(b) + b.wedge(a)).is_zero()

    @given(st.lists(st.integers(-3, 3), min_size=6, max_size=6))
    @settings(max_examples=25, deadline=None)
    def test_d_squared_vanishes(self, c):
        y1, y2, y3 = Y(1), Y(2), Y(3)
        f = c[0] * y1 ** 3 + c[1] * y1 * y2 + c[2] * y2 ** 2 * y3 + c[3] * y3 + c[4] * y1 * y2 * y3 + c[5]
        assert DifferentialForm.function(3, f).d().d().is_zero()
        one = DifferentialForm.make(3, 1, {(0,): f, (2,): c[0] * y2 * f})
        assert one.d().d().is_zero()

    @given(st.floats(-1, 1), st.floats(-1, 1))
    @settings(max_examples=25, deadline=None)
    def test_evaluate_matches_expression(self, a, b):
        form = DifferentialForm.make(2, 1, {(0,): Y(1) * Y(2), (1,): sp.sin(Y(1))})
        vals = form.dense([[a, b]])[0]
        assert np.allclose(vals, [a * b, np.sin(a)])


class TestPartitionOfUnity:
    def test_single_chart_is_one(self):
        ch = line_chart()
        pou = partition_of_unity({"U": ch}, {"U": Box((-1.5,), (1.5,))})
        pts = np.linspace(-1.4, 1.4, 11)[:, None]
        assert np.allclose(pou.chi("U", pts), 1.0)

    def test_nested_supports_sum_to_one(self):
        # chart 1 is the line y2 = 0 inside chart 2 = the square
        c1 = OrbifoldChart("c1", Box((-1.0,), (1.0,)), FiniteGroupAction.trivial(1))
        c2 = OrbifoldChart("c2", Box((-1.0, -1.0), (1.0, 1.0)), FiniteGroupAction.trivial(2))
        phi = MapExpr((Y(1), sp.Integer(0)), 1)
        pi = MapExpr((Y(1),), 2)
        pou = partition_of_unity(
            {"c1": c1, "c2": c2},
            {"c1": Box((-0.5,), (0.5,)), "c2": Box((-0.8, -0.8), (0.8, 0.8))},
            transfers={("c1", "c2"): (phi, None), ("c2", "c1"): (pi, None)},
        )
        x = np.linspace(-0.8, 0.8, 33)[:, None]
        # direct evaluation of the normalization formula on the shared locus
        total = pou.chi("c1", x) + pou.chi("c2", phi(x))
        assert np.max(np.abs(total - 1.0)) < 1e-10

    def test_cover_gap(self):
        ch = line_chart()
        with pytest.raises(VfckitError) as e:
            partition_of_unity({"U": ch}, {"U": Box((0.5,), (1.5,))}, target={"U": np.array([[0.0]])})
        assert e.value.code == "COVER_GAP"
        assert np.allclose(e.value.witness, [0.0])


class TestIntegrateTopForm:
    BUMP = sp.exp(-Y(1) ** 2 * 4)

    def _mass(self):
        x, w = gl_interval(-2.0, 2.0, 200)
        return float(np.dot(np.exp(-4 * x ** 2), w))

    def test_g1_unit_mass(self):
        ch = line_chart()
        form = DifferentialForm.volume(1, self.BUMP / self._mass())
        assert abs(integrate_top_form({"U": ch}, {"U": form}, q=64) - 1.0) < 1e-8

    def test_g2_halves(self):
        ch = line_chart(group=SIGN)
        form = DifferentialForm.volume(1, self.BUMP / self._mass())
        assert abs(integrate_top_form({"U": ch}, {"U": form}, q=64) - 0.5) < 1e-8

    def test_zero_form(self):
        ch = line_chart()
        assert integrate_top_form({"U": ch}, {"U": DifferentialForm.volume(1, 0)}) == 0.0

    @given(st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=20, deadline=None)
    def test_linear(self, a, b):
        ch = line_chart()
        f = DifferentialForm.volume(1, Y(1) ** 2)
        g = DifferentialForm.volume(1, sp.cos(Y(1)))
        lhs = integrate_top_form({"U": ch}, {"U": f.scale(a) + g.scale(b)})
        rhs = a * integrate_top_form({"U": ch}, {"U": f}) + b * integrate_top_form({"U": ch}, {"U": g})
        assert abs(lhs - rhs) < 1e-9 * (1 + abs(lhs))

    def test_relabeling_invariant(self):
        a = line_chart("a")
        b = OrbifoldChart("b", Box((0.0,), (1.0,)), FiniteGroupAction.trivial(1))
        fa, fb = DifferentialForm.volume(1, Y(1) ** 2), DifferentialForm.volume(1, Y(1))
        one = integrate_top_form({"a": a, "b": b}, {"a": fa, "b": fb})
        two = integrate_top_form({"x": b, "y": a}, {"x": fb, "y": fa})
        assert one == two


class TestDomains:
    @given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
    @settings(max_examples=30, deadline=None)
    def test_ball_contains(self, x, y):
        b = Ball((0.0, 0.0), 1.0)
        assert bool(b.contains([x, y])[0]) == (x * x + y * y < 1.0)

    def test_ball_quadrature_area(self):
        pts, wts = Ball((0.0, 0.0), 2.0).quadrature(16)
        assert abs(wts.sum() - 4 * np.pi) < 1e-12

    def test_box_faces(self):
        b = Box((0.0, -1.0), (1.0, 1.0), (True, False), (True, False))
        assert [f[:2] for f in b.faces()] == [(0, "lower"), (0, "upper")]
