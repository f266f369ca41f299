from __future__ import annotations

import numpy as np
import pytest
import sympy as sp

from vfckit.errors import VfckitError
from vfckit.expr import MapExpr, MatrixExpr, Y
from vfckit.gcs import (
    ChartMap,
    EmbeddingRecord,
    GoodCoordinateSystem,
    build_gcs,
    dimension_stratum,
    identity_map,
    stratum_closed_check,
    verify_embedding_record,
    verify_gcs_axioms,
)
from vfckit.kuranishi import KuranishiStructure
from vfckit.orbifold import Box

from .conftest import built, scenario
from .kit import change, chart

y1, y2 = Y(1), Y(2)


def two_points_same_dim(glue=False):
    a = chart("a", [-1], [1], [y1])
    b = chart("b", [-1], [1], [y1])
    changes = [change("ab", "a", "b", [y1], [[1]], 1, kind="open")] if glue else []
    return {"a": a, "b": b}, changes


class TestBuild:
    def test_g7_chain(self):
        gcs, rec, rep = built("G7", "two")
        assert rep.passed
        assert gcs.order == {("c1", "c2")}
        assert gcs.pieces() == ["c1", "c2"]

    def test_g1_singleton(self):
        gcs, rec, rep = built("G1")
        assert list(gcs.nodes) == ["U"] and not gcs.order
        assert verify_embedding_record(rec).passed

    def test_disjoint_same_dim_merged(self):
        a = chart("a", [-1], [1], [y1])
        b = chart("b", [-1], [1], [y1], gc=[y1 + 10])
        gcs, _, rep = build_gcs(KuranishiStructure({"a": a, "b": b}))
        assert list(gcs.nodes) == ["a+b"] and rep.passed

    def test_overlapping_unglued(self):
        charts, _ = two_points_same_dim()
        with pytest.raises(VfckitError) as e:
            build_gcs(KuranishiStructure(charts))
        assert e.value.code == "INCOMPATIBLE_CHARTS"

    @pytest.mark.parametrize("name", ["G1", "G2", "G3(n=2)", "G3(n=3)", "G4", "G5", "G7"])
    def test_self_consistent(self, name):
        gcs, rec, rep = built(name)
        assert verify_gcs_axioms(gcs).passed
        assert verify_embedding_record(rec).passed


class TestAxiomDefects:
    def test_unordered_overlap(self):
        charts, _ = two_points_same_dim()
        gcs = GoodCoordinateSystem(charts, {"a": ["a"], "b": ["b"]})
        c = verify_gcs_axioms(gcs).check("comparability")
        assert c.status == "FAIL" and c.witness["nodes"] == ["a", "b"]

    def test_non_injective_gluing(self):
        c1 = chart("c1", [-1], [1], [y1], gc=[y1, 0])
        c2 = chart("c2", [-1, -1], [1, 1], [y1, y2])
        fold = change("fold", "c1", "c2", [y1 ** 2, 0], [[1], [0]], 1)
        gcs = GoodCoordinateSystem({"c1": c1, "c2": c2}, {"c1": ["c1"], "c2": ["c2"]}, {("c1", "c2")}, [fold])
        c = verify_gcs_axioms(gcs).check("hausdorff")
        assert c.status == "FAIL"
        p, q = c.witness["points"]
        assert abs(p[0] + q[0]) < 1e-12

    def test_change_between_unordered_nodes(self):
        gcs0, _, _ = built("G7", "two")
        gcs = GoodCoordinateSystem(gcs0.charts, gcs0.nodes, set(), gcs0.changes, extension_data=gcs0.extension_data)
        rep = verify_gcs_axioms(gcs)
        c = rep.check("changes_follow_order")
        assert c.status == "FAIL" and c.witness["change"] == "c12"

    def test_support_gap(self):
        c = chart("U", [-2], [2], [y1])
        gcs = GoodCoordinateSystem({"U": c}, {"U": ["U"]}, K={"U": Box((0.5,), (1.5,))})
        cov = verify_gcs_axioms(gcs).check("support_covering")
        assert cov.status == "FAIL" and np.allclose(cov.witness["point"], [0.0])

    def test_cyclic_order(self):
        gcs0, _, _ = built("G7", "two")
        gcs = GoodCoordinateSystem(gcs0.charts, gcs0.nodes, {("c1", "c2"), ("c2", "c1")}, gcs0.changes)
        c = verify_gcs_axioms(gcs).check("partial_order")
        assert c.status == "FAIL" and c.witness["reason"] == "not antisymmetric"


def _g7_kg(map_c1: ChartMap):
    gcs, rec, _ = built("G7", "two")
    maps = dict(rec.maps)
    maps["c1"] = map_c1
    return EmbeddingRecord("KG", rec.src_charts, rec.dst_charts, maps, rec.src_changes, rec.dst_changes)


class TestEmbeddingRecords:
    def test_kg_record_linear(self):
        _, rec, _ = built("G7", "two")
        rep = verify_embedding_record(rec)
        assert rep.passed and rep.check("commuting_squares").residual == 0.0

    def test_gg_identity(self):
        gcs, _, _ = built("G7", "two")
        maps = {p: identity_map(gcs.charts[p]) for p in gcs.pieces()}
        rec = EmbeddingRecord("GG", gcs.charts, gcs.charts, maps, gcs.changes, gcs.changes, {n: n for n in gcs.nodes}, gcs.order, gcs.order)
        assert verify_embedding_record(rec).passed

    def test_shifted_map_breaks_square(self):
        gcs, _, _ = built("G7", "two")
        ch = gcs.charts["c1"]
        shifted = ChartMap("c1", MapExpr((y1 + sp.Rational(1, 10),), 1), (0,), MatrixExpr.constant([[1.0]], 1))
        rep = verify_embedding_record(_g7_kg(shifted))
        sq = rep.check("commuting_squares")
        assert sq.status == "FAIL" and abs(sq.residual - 0.1) < 1e-12
        assert rep.check("section_compatibility").status == "FAIL"

    def test_gg_order_reversed(self):
        gcs, _, _ = built("G7", "two")
        maps = {p: identity_map(gcs.charts[p]) for p in gcs.pieces()}
        rec = EmbeddingRecord("GG", gcs.charts, gcs.charts, maps, gcs.changes, gcs.changes, {"c1": "c2", "c2": "c1"}, gcs.order, gcs.order)
        assert verify_embedding_record(rec).check("order_preserving").status == "FAIL"

    def test_gk_mismatched_domain(self):
        gcs, _, _ = built("G7", "two")
        m = identity_map(gcs.charts["c2"], "c2", Box((-0.3, -0.3), (0.3, 0.3)))
        rec = EmbeddingRecord("GK", gcs.charts, gcs.charts, {"c2": m}, src_support={"c2": gcs.K["c2"]})
        c = verify_embedding_record(rec).check("support_in_domain")
        assert c.status == "FAIL" and c.witness["chart"] == "c2"


class TestStrata:
    def test_g7_dimension_strata(self):
        gcs, _, _ = built("G7", "two")
        assert len(dimension_stratum(gcs, 2)["samples"]) > 0
        assert dimension_stratum(gcs, 3)["charts"] == []

    def test_closed(self):
        gcs, _, _ = built("G7", "two")
        assert stratum_closed_check(gcs, 2).status == "PASS"
