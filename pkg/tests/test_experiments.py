import json

import numpy as np
import pytest

import rbsde as rb
from rbsde.cli import main as cli_main

from test_config import binding_config


def constant_terminal_config(n=4, kappa=2):
    doc = binding_config(n, kappa)
    doc["driver"] = {"kind": "zero", "d": 2}
    doc["terminal"] = {"kind": "constant", "values": [1.0, 0.0]}
    doc["costs"] = {"kind": "constant", "matrix": [[0.0, 2.0], [2.0, 0.0]]}
    return doc


class TestRunSingle:
    def test_constant_terminal_summary(self):
        cfg = rb.load_config(constant_terminal_config())
        summary = rb.run_single(cfg)
        assert summary["y0_1"] == pytest.approx(1.0, abs=1e-14)
        assert summary["y0_2"] == pytest.approx(0.0, abs=1e-14)
        assert summary["engine"] == "lattice"

    def test_outputs_are_byte_identical(self, tmp_path):
        cfg = rb.load_config(binding_config())
        a, b = tmp_path / "a", tmp_path / "b"
        rb.run_single(cfg, out_dir=str(a))
        rb.run_single(cfg, out_dir=str(b))
        assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()
        sa = (a / "summary.csv").read_text().splitlines()
        sb = (b / "summary.csv").read_text().splitlines()
        # identical except the wall-time column
        cols = sa[0].split(",")
        t_idx = cols.index("wall_time_s")
        for la, lb in zip(sa[1:], sb[1:]):
            va, vb = la.split(","), lb.split(",")
            del va[t_idx], vb[t_idx]
            assert va == vb

    def test_one_regime_matches_textbook_scheme(self):
        doc = binding_config()
        doc["driver"] = {"kind": "affine", "intercept": [0.3], "y": [-0.4]}
        doc["terminal"] = {"kind": "affine", "intercept": [0.0], "x": [[1.0]]}
        doc["costs"] = {"kind": "constant", "matrix": [[0.0]]}
        doc["grid"] = {"n": 8, "kappa": 4}
        cfg = rb.load_config(doc)
        summary = rb.run_single(cfg)
        p = cfg.make_problem(8, 4)
        eng = rb.LatticeEngine(rb.build_lattice(p.sde, p.grid))
        ref = rb.unreflected_backward_solve(p, eng)
        assert summary["y0_1"] == pytest.approx(float(ref.y0[0]), abs=1e-12)

    def test_regression_engine_summary_rows(self, tmp_path):
        cfg = rb.load_config(binding_config(
            n=8, kappa=2, engine={"kind": "regression", "paths": 2000, "degree": 2}))
        rb.run_single(cfg, out_dir=str(tmp_path))
        lines = (tmp_path / "solution.csv").read_text().splitlines()
        assert "summary" in lines[1]


class TestRunConvergence:
    def test_degenerate_instance_flagged(self):
        doc = constant_terminal_config()
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        table = rb.run_convergence(rb.load_config(doc))
        assert table.degenerate
        assert "degenerate" in str(table)

    def test_mesh_study_produces_sane_slope(self):
        doc = binding_config()
        doc["grid"] = {"study": "mesh", "n_values": [8, 16, 32, 64],
                       "coupling": "equal", "reference_n": 512}
        table = rb.run_convergence(rb.load_config(doc))
        assert not table.degenerate
        assert np.all(np.isfinite(table.slopes))
        assert np.all(table.slopes > 0.2)
        assert table.rows[-1]["is_reference"] == 1

    def test_needs_at_least_four_grids(self):
        doc = binding_config()
        doc["grid"] = {"study": "mesh", "n_values": [8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        with pytest.raises(ValueError, match="at least 4"):
            rb.run_convergence(rb.load_config(doc))

    def test_z_dependent_rate_study_refused(self):
        doc = binding_config()
        doc["driver"] = {"kind": "expr",
                         "components": [["*", ["z", 0], 0.1], ["*", ["z", 0], 0.1]],
                         "lipschitz": 0.1, "depends_on_z": True}
        doc["engine"] = {"kind": "regression", "paths": 500, "degree": 1}
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        with pytest.raises(ValueError, match="independent of z"):
            rb.run_convergence(rb.load_config(doc))

    def test_exploratory_mode_runs_z_dependent(self, capsys):
        doc = binding_config()
        doc["driver"] = {"kind": "expr",
                         "components": [["*", ["z", 0], 0.1], ["*", ["z", 0], 0.1]],
                         "lipschitz": 0.1, "depends_on_z": True}
        doc["engine"] = {"kind": "regression", "paths": 400, "degree": 1}
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 48}
        doc["exploratory"] = True
        table = rb.run_convergence(rb.load_config(doc))
        out = capsys.readouterr().out
        assert "no rate is asserted" in out
        assert len(table.rows) == 5

    def test_reflection_study(self):
        doc = binding_config()
        doc["grid"] = {"study": "reflection", "n": 64,
                       "kappa_values": [1, 2, 4, 8]}
        table = rb.run_convergence(rb.load_config(doc))
        assert len(table.rows) == 5
        assert np.all(np.isfinite(table.slopes))

    def test_csv_schema(self, tmp_path):
        doc = binding_config()
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        table = rb.run_convergence(rb.load_config(doc))
        out = tmp_path / "convergence.csv"
        table.to_csv(str(out))
        head = out.read_text().splitlines()[0].split(",")
        assert head == ["n", "kappa", "mesh", "reflection_mesh", "y0_1", "y0_2",
                        "abs_err_1", "abs_err_2", "wall_time_s", "is_reference"]


class TestRunOracleCompare:
    def test_tiny_binding_instance_passes(self):
        report = rb.run_oracle_compare(rb.load_config(binding_config(4, 2)))
        assert report.ok
        assert report.max_discrepancy <= 1e-10

    def test_constant_terminal_exact(self):
        report = rb.run_oracle_compare(rb.load_config(constant_terminal_config()))
        assert report.ok
        assert report.rows[0]["scheme_y_tilde0"] == pytest.approx(1.0)
        assert report.rows[1]["scheme_y_tilde0"] == pytest.approx(0.0)

    def test_too_large_rejected_with_count(self):
        with pytest.raises(ValueError, match="16 decision points"):
            rb.run_oracle_compare(rb.load_config(binding_config(6, 3)))

    def test_cap_override_via_config(self):
        doc = binding_config(6, 3)
        doc["max_decision_points"] = 16
        report = rb.run_oracle_compare(rb.load_config(doc))
        assert report.ok

    def test_random_tiny_batch(self):
        for seed in range(5):
            doc = binding_config(4, 2)
            doc["costs"]["matrix"] = [[0.0, 0.2 + 0.1 * seed],
                                      [0.25 + 0.1 * seed, 0.0]]
            report = rb.run_oracle_compare(rb.load_config(doc))
            assert report.ok, str(report)


class TestRunEngineCompare:
    def test_small_instance_within_band(self):
        doc = binding_config(16, 4, engine={"kind": "regression", "paths": 4000,
                                            "degree": 2})
        doc["bootstrap"] = 12
        report = rb.run_engine_compare(rb.load_config(doc))
        assert report.ok, str(report)
        assert np.all(report.bootstrap_se > 0)

    def test_deterministic_model_agrees_exactly(self):
        doc = binding_config(8, 2, engine={"kind": "regression", "paths": 200,
                                           "degree": 2})
        doc["sde"] = {"kind": "constant", "b": 0.5, "sigma": 0.0, "x0": 1.0}
        doc["bootstrap"] = 4
        report = rb.run_engine_compare(rb.load_config(doc))
        np.testing.assert_allclose(report.y0_regression, report.y0_lattice, atol=1e-8)

    def test_nonconstant_model_rejected(self):
        doc = binding_config(8, 2, engine={"kind": "regression", "paths": 200,
                                           "degree": 1})
        doc["sde"] = {"kind": "expr", "m": 1, "q": 1, "x0": [0.0],
                      "drift": [["-", ["x", 0]]], "diffusion": [[1.0]],
                      "lipschitz": 1.0}
        with pytest.raises(ValueError, match="constant"):
            rb.run_engine_compare(rb.load_config(doc))


class TestCli:
    def _write(self, tmp_path, doc, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return str(path)

    def test_validate_pass_exit_zero(self, tmp_path, capsys):
        code = cli_main(["validate", self._write(tmp_path, binding_config())])
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_validate_violation_exit_two(self, tmp_path, capsys):
        doc = binding_config()
        doc["costs"]["matrix"] = [[0.0, -0.1], [0.3, 0.0]]
        code = cli_main(["validate", self._write(tmp_path, doc)])
        assert code == 2

    def test_config_error_exit_one(self, tmp_path, capsys):
        doc = binding_config()
        doc["grid"] = {"n": 6, "kappa": 5}
        code = cli_main(["validate", self._write(tmp_path, doc)])
        assert code == 1
        assert "does not divide" in capsys.readouterr().err

    def test_unreadable_config_exit_one(self, tmp_path):
        assert cli_main(["solve", str(tmp_path / "missing.json")]) == 1

    def test_solve_writes_outputs(self, tmp_path, capsys):
        code = cli_main(["solve", self._write(tmp_path, binding_config()),
                         "--out", str(tmp_path / "out")])
        assert code == 0
        assert (tmp_path / "out" / "solution.csv").exists()
        assert (tmp_path / "out" / "summary.csv").exists()
        assert "y0_1" in capsys.readouterr().out

    def test_seed_override(self, tmp_path, capsys):
        doc = binding_config(engine={"kind": "regression", "paths": 300, "degree": 1})
        code = cli_main(["solve", self._write(tmp_path, doc), "--seed", "123"])
        assert code == 0
        assert "seed=123" in capsys.readouterr().out

    def test_converge_degenerate_passes(self, tmp_path, capsys):
        doc = constant_terminal_config()
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        code = cli_main(["converge", self._write(tmp_path, doc),
                         "--out", str(tmp_path / "c")])
        assert code == 0
        assert (tmp_path / "c" / "convergence.csv").exists()

    def test_converge_slope_assertion_failure_exit_two(self, tmp_path):
        doc = binding_config()
        doc["grid"] = {"study": "mesh", "n_values": [8, 16, 32, 64],
                       "coupling": "equal", "reference_n": 256}
        doc["assert_slope"] = 5.0  # unattainable on purpose
        code = cli_main(["converge", self._write(tmp_path, doc)])
        assert code == 2

    def test_oracle_compare_cli(self, tmp_path, capsys):
        code = cli_main(["oracle-compare", self._write(tmp_path, binding_config(4, 2)),
                         "--out", str(tmp_path / "oc")])
        assert code == 0
        assert (tmp_path / "oc" / "oracle_compare.csv").exists()

    def test_oracle_compare_too_large_exit_one(self, tmp_path, capsys):
        code = cli_main(["oracle-compare", self._write(tmp_path, binding_config(6, 3))])
        assert code == 1
        assert "16 decision points" in capsys.readouterr().err

    def test_engine_compare_cli(self, tmp_path, capsys):
        doc = binding_config(16, 4, engine={"kind": "regression", "paths": 3000,
                                            "degree": 2})
        doc["bootstrap"] = 8
        code = cli_main(["engine-compare", self._write(tmp_path, doc),
                         "--out", str(tmp_path / "ec")])
        assert code == 0
        assert (tmp_path / "ec" / "engine_compare.csv").exists()

    def test_threads_flag_accepted(self, tmp_path):
        doc = binding_config()
        doc["grid"] = {"study": "mesh", "n_values": [4, 8, 16, 32],
                       "coupling": "equal", "reference_n": 64}
        doc["assert_slope"] = False
        assert cli_main(["converge", self._write(tmp_path, doc), "--threads", "2"]) == 0
