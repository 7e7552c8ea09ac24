"""Tests for cli.py — argument parsing, artifacts and exit codes."""

import json
import math

import numpy as np
import pytest

import cli
import config
from frac_core import FracParams
from frac_ops import FracOperator, ds_grad
from grid_field import Grid, ScalarField, read_field, write_field
from membership_lab import gaussian
from piola_lab import VERIFY_COLUMNS
from tests.conftest import SAMPLE_PROBLEM_TEXT


def _lines(path):
    return path.read_text().splitlines()


# ============================================================
# Parsing
# ============================================================

class TestParsing:
    """Bad input exits with 2."""

    def test_no_command(self):
        assert cli.run([]) == 2

    def test_unknown_check(self, out_dir):
        assert cli.run(["verify", "curl", "--out", str(out_dir)]) == 2

    def test_bad_list(self, out_dir):
        assert cli.run(["verify", "ibp", "--N", "32,abc", "--out", str(out_dir)]) == 2

    def test_invalid_parameters(self, out_dir):
        assert cli.run(["verify", "ibp", "--s", "1.5", "--N", "32", "--out", str(out_dir)]) == 2

    def test_list_types(self):
        assert cli._int_list("16, 32,") == [16, 32]
        assert cli._float_list("0.25,0.5") == [0.25, 0.5]

    def test_membership_defaults(self):
        args = cli.build_parser().parse_args(["membership"])
        assert args.L == 2.0
        assert args.example == "cube-fracture"
        assert args.p_list == [2.0]

    @pytest.mark.parametrize("argv", [
        ["verify", "piola"],
        ["solve", "problem.txt"],
        ["selftest"],
        ["gradient", "u.frf"],
    ])
    def test_other_commands_keep_box_default(self, argv):
        parser = cli.build_parser()
        parser.parse_args(["membership"])
        assert parser.parse_args(argv).L == 4.0


class TestArtifacts:
    """Versioned CSV output."""

    def test_cells(self):
        assert cli._cell(True) == "true"
        assert cli._cell(math.nan) == "nan"
        assert cli._cell(0.5) == "5.000000000000e-01"
        assert cli._cell(64) == "64"

    def test_write_csv(self, tmp_path):
        path = cli.write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.25], ["x", False]])
        assert _lines(path) == [config.CSV_HEADER, "a,b", "1,2.500000000000e-01", "x,false"]


# ============================================================
# Commands
# ============================================================

class TestVerifyCommand:
    """verify <check>."""

    def test_ibp_passes(self, out_dir):
        assert cli.run(["verify", "ibp", "--N", "32,64", "--out", str(out_dir)]) == 0
        lines = _lines(out_dir / "ibp.csv")
        assert lines[0] == "# fracvar-csv v1"
        assert lines[1] == ",".join(VERIFY_COLUMNS)
        assert len(lines) == 4

    def test_tolerance_failure(self, out_dir):
        assert cli.run(["verify", "product", "--N", "32", "--tol", "0", "--out", str(out_dir)]) == 1
        assert (out_dir / "product.csv").exists()

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setattr(config, "FRACVAR_OUT", str(tmp_path / "env"))
        assert cli.run(["verify", "ibp", "--N", "32", "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "env" / "ibp.csv").exists()
        assert not (tmp_path / "flag").exists()

    def test_deterministic(self, tmp_path, monkeypatch):
        monkeypatch.setattr(config, "FRACVAR_OUT", "")
        for name in ("first", "second"):
            assert cli.run(["verify", "ibp", "--n", "2", "--N", "16", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "first" / "ibp.csv").read_bytes() == (tmp_path / "second" / "ibp.csv").read_bytes()

    def test_bad_minor_spec(self, out_dir):
        assert cli.run(["verify", "piola", "--n", "2", "--spec", "13/12", "--out", str(out_dir)]) == 2


class TestGradientCommand:
    """gradient <field>."""

    def test_scalar_field(self, tmp_path, out_dir):
        grid = Grid(1, 4.0, 32)
        u = gaussian(grid)
        write_field(tmp_path / "u.frf", u)
        assert cli.run(["gradient", str(tmp_path / "u.frf"), "--out", str(out_dir)]) == 0
        result = read_field(out_dir / "gradient.frf")
        expected = ds_grad(FracOperator(FracParams(1, 0.5), grid), u)
        assert result.values == pytest.approx(expected.values[..., 0], abs=1e-14)

    def test_div_needs_vector_field(self, tmp_path, out_dir):
        write_field(tmp_path / "u.frf", gaussian(Grid(1, 4.0, 32)))
        assert cli.run(["gradient", str(tmp_path / "u.frf"), "--div", "--out", str(out_dir)]) == 2

    def test_missing_file(self, tmp_path, out_dir):
        assert cli.run(["gradient", str(tmp_path / "missing.frf"), "--out", str(out_dir)]) == 2

    def test_rim_support_is_rejected(self, tmp_path, out_dir):
        grid = Grid(1, 4.0, 16)
        write_field(tmp_path / "u.frf", ScalarField(grid, np.ones(grid.shape)))
        assert cli.run(["gradient", str(tmp_path / "u.frf"), "--out", str(out_dir)]) == 2


class TestMembershipCommand:
    """membership --example ..."""

    def test_fracture_scan(self, out_dir):
        argv = ["membership", "--s-list", "0.2,0.8", "--N", "32,64,128", "--out", str(out_dir)]
        assert cli.run(argv) == 0
        lines = _lines(out_dir / "membership.csv")
        assert len(lines) == 2 + 6
        assert lines[-1].endswith("diverging")
        assert lines[2].endswith("bounded")

    def test_misclassification_fails(self, out_dir, mocker):
        mocker.patch("cli.misclassifications", side_effect=lambda example, lines: lines[:1])
        argv = ["membership", "--s-list", "0.2", "--N", "16,32", "--out", str(out_dir)]
        assert cli.run(argv) == 1


class TestSolveCommand:
    """solve <problem>."""

    def test_solve(self, tmp_path, out_dir):
        path = tmp_path / "problem.txt"
        path.write_text(SAMPLE_PROBLEM_TEXT)
        assert cli.run(["solve", str(path), "--out", str(out_dir)]) == 0
        report = json.loads((out_dir / "solve_report.json").read_text())
        assert report["converged"] is True
        assert report["reason"] == "converged"
        minimizer = read_field(out_dir / "minimizer.frf")
        assert minimizer.grid == Grid(1, 4.0, 32)

    def test_not_converged(self, tmp_path, out_dir):
        path = tmp_path / "problem.txt"
        path.write_text(SAMPLE_PROBLEM_TEXT.replace("solver.max_iters = 200", "solver.max_iters = 1"))
        assert cli.run(["solve", str(path), "--tol", "1e-14", "--out", str(out_dir)]) == 1
        assert json.loads((out_dir / "solve_report.json").read_text())["reason"] == "max_iters"

    def test_bad_problem_file(self, tmp_path, out_dir):
        path = tmp_path / "problem.txt"
        path.write_text(SAMPLE_PROBLEM_TEXT + "solver.colour = red\n")
        assert cli.run(["solve", str(path), "--out", str(out_dir)]) == 2


class TestSelftestCommand:
    """selftest [--quick]."""

    def test_quick_suite_passes(self, out_dir):
        assert cli.run(["selftest", "--quick", "--out", str(out_dir)]) == 0
        lines = _lines(out_dir / "selftest.csv")
        assert lines[1] == "check,value,tolerance,passed"
        assert all(line.endswith("true") for line in lines[2:])

    def test_refinement_rows_use_default_tolerances(self):
        rows = {row[0]: row for row in cli._selftest_rows(32, 1)}
        assert {
            "piola-n2", "product-grad-n1", "product-div-n1", "det-ibp-n2", "det-riesz-n2",
            "gaussian-oracle-quad", "gaussian-oracle-spec", "fracture-verdicts", "cavitation-verdicts",
        } <= set(rows)
        for check in ("piola", "det-ibp", "det-riesz"):
            assert rows[f"{check}-n2"][2] == config.DEFAULT_TOLERANCES[check]
        assert rows["product-div-n1"][2] == config.DEFAULT_TOLERANCES["product"]
        assert rows["fracture-verdicts"][1] == 0.0
        assert rows["cavitation-verdicts"][1] == 0.0

    def test_failure_exit_code(self, out_dir, mocker):
        rows = mocker.patch("cli._selftest_rows", return_value=[["cns-closed-form", 1.0, 1e-12, False]])
        assert cli.run(["selftest", "--out", str(out_dir)]) == 1
        assert rows.call_args.args[0] == 64


class TestMain:
    """Entry point."""

    def test_exit_code(self, monkeypatch):
        monkeypatch.setattr("sys.argv", ["cli.py"])
        with pytest.raises(SystemExit) as exc:
            cli.main()
        assert exc.value.code == 2
