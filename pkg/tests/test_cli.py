from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
from fractions import Fraction

import pytest

from vfckit.cli import main, report_json, run
from vfckit.gallery import gallery

GALLERY = ["G1", "G2", "G3(n=2)", "G3(n=3)", "G3(n=4)", "G4", "G5", "G6", "G7"]


def cli(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


class TestSpecExamples:
    def test_count_g2(self, capsys):
        rc, out, _ = cli(capsys, "count", "gallery:G2", "--n", "100", "--seed", "7")
        assert rc == 0 and "total = 1/2" in out

    def test_boundary_g4(self, capsys):
        rc, out, _ = cli(capsys, "boundary", "gallery:G4", "--n", "50")
        assert rc == 0 and "total = 0/1" in out

    def test_stokes_g5(self, capsys, tmp_path):
        path = tmp_path / "ladder.csv"
        rc, _, _ = cli(capsys, "stokes", "gallery:G5", "--epsilon", "0.1", "--csv", str(path))
        assert rc == 0
        rows = list(csv.reader(path.open()))
        assert float(rows[1][1]) <= 1e-6


class TestVerify:
    @pytest.mark.parametrize("name", GALLERY)
    def test_gallery_passes(self, name):
        rep = run("verify", f"gallery:{name}", {})
        assert rep.passed, rep.failures()

    def test_gallery_entries(self):
        assert len(gallery()) == 7


class TestErrors:
    def test_mismatch(self, capsys):
        rc, _, err = cli(capsys, "count", "gallery:G4")
        assert rc == 2
        assert json.loads(err)["error"]["code"] == "COMMAND_SCENARIO_MISMATCH"

    def test_unknown_gallery(self, capsys):
        rc, _, err = cli(capsys, "verify", "gallery:G99")
        assert rc == 2 and json.loads(err)["error"]["code"] == "UNRESOLVED_LABEL"

    def test_bad_file(self, capsys, tmp_path):
        p = tmp_path / "bad.vfc"
        p.write_text("[chart U]\nchartt = 1\n")
        rc, _, err = cli(capsys, "verify", str(p))
        assert rc == 2 and json.loads(err)["error"]["code"] == "PARSE_ERROR"

    def test_failing_check_exits_one(self, capsys):
        # a tolerance no float computation can meet
        rc, out, _ = cli(capsys, "stokes", "gallery:G5", "--epsilon", "0.1", "--tol", "0")
        assert rc == 1 and "FAIL" in out


class TestOutputs:
    def test_json_report(self, capsys, tmp_path):
        path = tmp_path / "r.json"
        rc, _, _ = cli(capsys, "count", "gallery:G3(n=3)", "--json", str(path))
        data = json.loads(path.read_text())
        assert rc == 0 and data["results"]["total"] == "2/3"
        assert {"command", "scenario", "scenario_hash", "seed", "checks", "passed", "wall_time"} <= set(data)

    def test_deterministic_json(self):
        a = report_json(run("count", "gallery:G2", {"seed": 3}), with_time=False)
        b = report_json(run("count", "gallery:G2", {"seed": 3}), with_time=False)
        assert a == b

    @pytest.mark.parametrize("command,name", [("count", "G2"), ("perturb", "G7")])
    def test_threads_do_not_change_output(self, command, name):
        outs = []
        for threads in ("1", "8"):
            code = f"from vfckit.cli import run, report_json; print(report_json(run({command!r}, 'gallery:{name}', {{}}), with_time=False))"
            env = dict(os.environ, VFCKIT_THREADS=threads)
            outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout)
        assert outs[0] == outs[1]

    def test_console_script(self):
        r = subprocess.run([sys.executable, "-m", "vfckit.cli", "count", "gallery:G1"], capture_output=True, text=True)
        assert r.returncode == 0 and "total = 1/1" in r.stdout


class TestReplay:
    def test_multisection_blocks_reparse(self, tmp_path):
        import numpy as np

        from vfckit.gallery import gallery_text
        from vfckit.scenario import load_scenario

        rep = run("perturb", "gallery:G2", {"seed": 5})
        key = next(k for k in rep.results if k.endswith("multisection_blocks"))
        path = tmp_path / "g2.vfc"
        path.write_text(gallery_text("G2") + "\n" + rep.results[key])
        sc = load_scenario(str(path))
        from vfckit.gcs import build_gcs
        from vfckit.perturbation import build_multivalued_perturbation

        gcs = build_gcs(load_scenario("gallery:G2").structure())[0]
        orig = build_multivalued_perturbation(gcs, seed=5).at("U")
        _, replayed = sc.multisections["U"]
        pts = np.linspace(-1.5, 1.5, 11)[:, None]
        assert np.allclose(orig.values(pts, 0.01), replayed.values(pts, 0.01), atol=1e-15)

    def test_count_uses_declared_blocks(self, tmp_path, capsys):
        from vfckit.gallery import gallery_text

        # the swap pair is a valid multisection on the Z_2 line; zeros at +-0.05
        path = tmp_path / "g2.vfc"
        path.write_text(gallery_text("G2") + "\n[multisection U]\nchart = U\nbranches = [[y1 - 5*t], [y1 + 5*t]]\n")
        rep = run("count", str(path), {})
        assert rep.passed and rep.results["total"] == Fraction(1, 2)
        assert rep.results["all.perturbation"] == "declared"

    def test_declared_block_must_be_equivariant(self, tmp_path, capsys):
        from vfckit.gallery import gallery_text

        path = tmp_path / "g2.vfc"
        path.write_text(gallery_text("G2") + "\n[multisection U]\nchart = U\nbranches = [[y1 - 5*t]]\n")
        rc, _, err = cli(capsys, "count", str(path))
        assert rc == 2 and json.loads(err)["error"]["code"] == "TYPE_ERROR"
