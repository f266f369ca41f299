from __future__ import annotations

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vfckit.errors import VfckitError
from vfckit.expr import MapExpr, Y, coerce_expr, parse_constant, parse_expr, to_text
from vfckit.gallery import gallery, gallery_names, gallery_text
from vfckit.scenario import load_scenario, loads

MINIMAL = """
[scenario tiny]
vdim = 0

[chart U]
dim = 1
domain.lower = [-1]
domain.upper = [1]
fiber_dim = 1
section = [y1 - 1/4]
"""


class TestExpressions:
    @pytest.mark.parametrize(
        "text, value",
        [("1 + 2*3", 7.0), ("2^3^2", 512.0), ("-2^2", -4.0), ("cos(0) + exp(0)", 2.0), ("(E - 1)/2", (np.e - 1) / 2), ("sin(pi/2)", 1.0)],
    )
    def test_constants(self, text, value):
        assert abs(parse_constant(text) - value) < 1e-14

    @pytest.mark.parametrize("text", ["y1 +", "(y1", "y1 ** 2", "y1 $ 2"])
    def test_rejected(self, text):
        with pytest.raises(VfckitError) as e:
            parse_expr(text)
        assert e.value.code == "PARSE_ERROR"

    @pytest.mark.parametrize("text", ["abs(y1)", "foo(y1)"])
    def test_unsupported_function(self, text):
        with pytest.raises(VfckitError) as e:
            parse_expr(text)
        assert e.value.code == "TYPE_ERROR"

    def test_disallowed_variable(self):
        with pytest.raises(VfckitError):
            parse_expr("y2", allowed={Y(1)})

    @given(st.integers(-5, 5), st.integers(-5, 5), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_print_parse_roundtrip(self, a, b, p):
        e = a * Y(1) ** p + b * sp.sin(Y(2)) - sp.Rational(a, 7)
        assert sp.simplify(parse_expr(to_text(e)) - e) == 0

    def test_coerce_plain_symbols(self):
        e = coerce_expr(sp.Symbol("y2") + 1)
        assert e.free_symbols == {Y(2)}

    @given(st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=25, deadline=None)
    def test_jacobian_matches_finite_differences(self, a, b):
        m = MapExpr((Y(1) ** 2 * Y(2), sp.sin(Y(1) + Y(2))), 2)
        J = m.jacobian("y").at(np.array([a, b]))
        h = 1e-6
        fd = np.column_stack([(m.at(np.array([a, b]) + h * e) - m.at(np.array([a, b]) - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.allclose(J, fd, atol=1e-6)


class TestScenarioFiles:
    def test_minimal(self):
        sc = loads(MINIMAL, "tiny")
        assert sc.vdim == 0
        assert np.allclose(sc.charts["U"].zero_samples(), [[0.25]])

    def test_unknown_key(self):
        with pytest.raises(VfckitError) as e:
            loads(MINIMAL + "colour = red\n")
        assert e.value.code == "PARSE_ERROR"
        assert e.value.witness["line"] == 11

    def test_unknown_block(self):
        with pytest.raises(VfckitError) as e:
            loads("[widget x]\n")
        assert e.value.code == "PARSE_ERROR"

    def test_unresolved_label(self):
        text = MINIMAL + "\n[change c]\nsrc = U\ndst = V\nphi = [y1]\n"
        with pytest.raises(VfckitError) as e:
            loads(text)
        assert e.value.code == "UNRESOLVED_LABEL"

    def test_section_length_mismatch(self):
        with pytest.raises(VfckitError) as e:
            loads(MINIMAL.replace("section = [y1 - 1/4]", "section = [y1, y1]"))
        assert e.value.code == "TYPE_ERROR"

    def test_missing_file(self):
        with pytest.raises(VfckitError) as e:
            load_scenario("/nonexistent/scenario.txt")
        assert e.value.code == "UNRESOLVED_LABEL"

    def test_file_roundtrip(self, tmp_path):
        p = tmp_path / "tiny.vfc"
        p.write_text(MINIMAL)
        assert load_scenario(str(p)).digest() == loads(MINIMAL, "tiny").digest()

    def test_comments_and_continuation(self):
        text = MINIMAL.replace("section = [y1 - 1/4]", "section = [  # the section\n  y1 - 1/4\n]")
        assert loads(text).digest() == loads(MINIMAL).digest()


class TestGallery:
    @pytest.mark.parametrize("name", gallery_names())
    def test_loads(self, name):
        sc = load_scenario(f"gallery:{name}")
        assert sc.charts

    def test_entries(self):
        assert [e.name for e in gallery()] == ["G1", "G2", "G3", "G4", "G5", "G6", "G7"]

    def test_unknown(self):
        with pytest.raises(VfckitError) as e:
            gallery_text("G42")
        assert e.value.code == "UNRESOLVED_LABEL"

    def test_spindle_needs_n_two(self):
        with pytest.raises(VfckitError):
            gallery_text("G3(n=1)")

    @pytest.mark.parametrize("name, vdim", [("G1", 0), ("G2", 0), ("G3(n=3)", 0), ("G4", 1), ("G5", 1), ("G6", 2), ("G7", 0)])
    def test_vdim(self, name, vdim):
        assert load_scenario(f"gallery:{name}").vdim == vdim
