"""Command-line behavior: exit codes, report formats, determinism."""

import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pipehess.cli import main, parse_sweep
from pipehess.specio import save_vector

SPECS = Path(__file__).resolve().parent.parent / "specs"


def _read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


class TestParseSweep:
    def test_geometric_range(self):
        assert parse_sweep("L=8..64x2") == ("L", (8, 16, 32, 64))
        assert parse_sweep("p=3..100x4") == ("p", (3, 12, 48))

    def test_single_value(self):
        assert parse_sweep("a=16") == ("a", (16,))

    @pytest.mark.parametrize(
        "text", ["q=8..16x2", "L=8..4x2", "L=8..16x1", "L=", "L=0", "L=1..2"]
    )
    def test_rejects_malformed(self, text):
        with pytest.raises(Exception):
            parse_sweep(text)


class TestVerifyCommand:
    def test_default_suite_passes(self, tmp_path):
        out = tmp_path / "report.json"
        code = main(
            ["verify", "--layers", "2", "--width", "2", "--params", "3",
             "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["all_pass"] is True
        assert len(doc["checks"]) == 8
        assert all(c["passed"] for c in doc["checks"])

    def test_depth_one_degenerate_case(self, tmp_path):
        out = tmp_path / "report.json"
        code = main(["verify", "--layers", "1", "--width", "2", "--params", "3",
                     "--out", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["all_pass"] is True

    def test_corrupted_derivative_fails_finite_difference_checks(self, tmp_path):
        out = tmp_path / "report.json"
        code = main(
            ["verify", "--layers", "2", "--width", "2", "--params", "2",
             "--self-test-corrupt", "--out", str(out)]
        )
        assert code == 1
        doc = json.loads(out.read_text())
        assert doc["all_pass"] is False
        by_name = {c["name"]: c for c in doc["checks"]}
        assert not by_name["finite_diff_gradient"]["passed"]
        # structural checks don't depend on layer derivatives being right
        assert by_name["golden_interleavings"]["passed"]

    def test_csv_and_json_agree_numerically(self, tmp_path):
        args = ["verify", "--layers", "2", "--width", "2", "--params", "3"]
        jout = tmp_path / "r.json"
        cout = tmp_path / "r.csv"
        assert main(args + ["--out", str(jout)]) == 0
        assert main(args + ["--format", "csv", "--out", str(cout)]) == 0
        doc = json.loads(jout.read_text())
        rows = _read_csv(cout)
        header = rows[0]
        checks = [r for r in rows[1:] if r[0] == "check"]
        assert len(checks) == len(doc["checks"])
        for row, want in zip(checks, doc["checks"]):
            rec = dict(zip(header, row))
            assert rec["name"] == want["name"]
            assert float(rec["error"]) == want["error"]
            assert float(rec["tolerance"]) == want["tolerance"]

    def test_tolerance_override_can_fail_the_suite(self, tmp_path):
        code = main(
            ["verify", "--layers", "2", "--width", "2", "--params", "3",
             "--tol", "0", "--out", str(tmp_path / "r.json")]
        )
        assert code == 1  # finite-difference error is never exactly zero


class TestSolveCommand:
    def test_shipped_quadratic_spec_has_analytic_answer(self, tmp_path):
        out = tmp_path / "solve.json"
        code = main(
            ["solve", "--spec", str(SPECS / "quadratic.json"),
             "--rhs", str(SPECS / "quadratic_rhs.json"),
             "--eps", "0", "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        x = np.array(doc["report"]["solution"])
        a = np.array([[2.0, 0.5], [0.5, 3.0]])
        np.testing.assert_allclose(x, np.linalg.solve(a, [1.0, -0.5]), atol=1e-8)

    def test_report_goes_to_stdout_without_out_flag(self, capsys):
        code = main(
            ["solve", "--spec", str(SPECS / "quadratic.json"),
             "--rhs", str(SPECS / "quadratic_rhs.json"), "--eps", "0"]
        )
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["command"] == "solve"

    def test_identical_runs_are_identical_modulo_wall_time(self, tmp_path):
        args = ["solve", "--spec", str(SPECS / "tanh_small.json"), "--seed", "7"]
        rhs = tmp_path / "rhs.json"
        save_vector(rhs, np.linspace(-1, 1, 12))
        docs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert main(args + ["--rhs", str(rhs), "--out", str(out)]) == 0
            doc = json.loads(out.read_text())
            doc["report"]["wall_time"] = None
            docs.append(doc)
        assert docs[0] == docs[1]

    def test_default_damping_is_recorded(self, tmp_path):
        out = tmp_path / "solve.json"
        rhs = tmp_path / "rhs.json"
        save_vector(rhs, np.zeros(12))
        code = main(
            ["solve", "--spec", str(SPECS / "tanh_small.json"),
             "--rhs", str(rhs), "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["report"]["eps"] == 1e-3
        assert not np.array(doc["report"]["solution"]).any()

    def test_missing_file_is_usage_error(self, tmp_path):
        code = main(
            ["solve", "--spec", str(tmp_path / "nope.json"),
             "--rhs", str(SPECS / "quadratic_rhs.json")]
        )
        assert code == 2

    def test_wrong_rhs_length_is_usage_error(self, tmp_path):
        rhs = tmp_path / "rhs.json"
        save_vector(rhs, np.ones(5))
        code = main(
            ["solve", "--spec", str(SPECS / "quadratic.json"), "--rhs", str(rhs)]
        )
        assert code == 2

    def test_singular_system_is_solve_failure(self, tmp_path):
        spec = tmp_path / "flat.json"
        spec.write_text(
            json.dumps(
                {
                    "version": 1,
                    "layers": [
                        {
                            "kind": "quadratic_loss",
                            "matrix": [[0.0, 0.0], [0.0, 0.0]],
                            "center": [0.0, 0.0],
                        }
                    ],
                    "point": {"z0": [0.0, 0.0], "params": [[0.0, 0.0]]},
                }
            )
        )
        rhs = tmp_path / "rhs.json"
        save_vector(rhs, np.ones(2))
        assert main(["solve", "--spec", str(spec), "--rhs", str(rhs),
                     "--eps", "0"]) == 1
        # damping the same system succeeds
        assert main(["solve", "--spec", str(spec), "--rhs", str(rhs),
                     "--eps", "0.5", "--out", str(tmp_path / "ok.json")]) == 0

    def test_refine_flag_accepted(self, tmp_path):
        out = tmp_path / "solve.json"
        code = main(
            ["solve", "--spec", str(SPECS / "quadratic.json"),
             "--rhs", str(SPECS / "quadratic_rhs.json"),
             "--eps", "0", "--refine", "--out", str(out)]
        )
        assert code == 0


class TestBenchCommand:
    def test_single_cell_produces_one_record_per_method(self, tmp_path):
        out = tmp_path / "bench.json"
        code = main(
            ["bench", "--layers", "3", "--width", "2", "--params", "3",
             "--methods", "hivp,dense", "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert [r["method"] for r in doc["records"]] == ["hivp", "dense"]
        assert doc["slopes"] == []  # one depth cannot support a fit
        assert len(doc["cross_checks"]) == 1
        assert doc["cross_checks"][0]["rel_diff"] < 1e-9

    def test_sweep_fits_slopes(self, tmp_path):
        out = tmp_path / "bench.json"
        code = main(
            ["bench", "--sweep", "L=4..16x2", "--width", "3", "--params", "3",
             "--methods", "hivp", "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert len(doc["records"]) == 3
        assert len(doc["slopes"]) == 1
        assert doc["slopes"][0]["method"] == "hivp"

    def test_csv_and_json_agree_numerically(self, tmp_path):
        args = ["bench", "--layers", "3", "--width", "2", "--params", "3",
                "--methods", "hivp,dense"]
        jout = tmp_path / "b.json"
        cout = tmp_path / "b.csv"
        assert main(args + ["--out", str(jout)]) == 0
        assert main(args + ["--format", "csv", "--out", str(cout)]) == 0
        doc = json.loads(jout.read_text())
        rows = _read_csv(cout)
        header = rows[0]
        records = [dict(zip(header, r)) for r in rows[1:] if r[0] == "record"]
        assert len(records) == len(doc["records"])
        for rec, want in zip(records, doc["records"]):
            assert int(rec["flops"]) == want["flops"]
            assert int(rec["peak_bytes"]) == want["peak_bytes"]
            assert float(rec["residual"]) == want["residual"]

    def test_cg_failures_are_recorded_not_fatal(self, tmp_path):
        """On an indefinite damped instance the iterative method can
        fail; the sweep must keep going and say why."""
        out = tmp_path / "bench.json"
        code = main(
            ["bench", "--layers", "4", "--width", "4", "--params", "4",
             "--methods", "hivp,cg", "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        methods = {r["method"] for r in doc["records"]}
        assert methods == {"hivp", "cg"}
        cg = [r for r in doc["records"] if r["method"] == "cg"][0]
        assert cg["error"] is None or "convergence" in cg["error"]

    def test_dense_guard_skips_large_cells(self, tmp_path):
        out = tmp_path / "bench.json"
        code = main(
            ["bench", "--layers", "600", "--width", "2", "--params", "4",
             "--methods", "dense", "--out", str(out)]
        )
        assert code == 0
        rec = json.loads(out.read_text())["records"][0]
        assert "guard" in rec["error"]
        assert rec["flops"] is None


class TestUsageErrors:
    def test_no_command(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_method(self):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--methods", "hivp,magic"])
        assert exc.value.code == 2

    def test_malformed_sweep(self):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--sweep", "L=8..4x2"])
        assert exc.value.code == 2

    def test_negative_eps(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--eps", "-1"])
        assert exc.value.code == 2

    def test_zero_layers(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--layers", "0"])
        assert exc.value.code == 2


@pytest.mark.skipif(shutil.which("pipehess") is None, reason="script not on PATH")
def test_console_script_entry_point():
    proc = subprocess.run(
        ["pipehess", "verify", "--layers", "1", "--width", "2", "--params", "2"],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert "checks passed" in proc.stderr
