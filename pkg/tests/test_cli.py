import json
import subprocess
import sys

import numpy as np
import pytest

from lyapcdr.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_INTEGRATION, EXIT_OK, main
from lyapcdr.config import RunConfig
from lyapcdr.diagnostics import BalanceSeries
from lyapcdr.model import equilibrium_from_mass

SMALL = dict(dim=1, degree=2, elements=[6], t_end=0.05, atol=1e-7, rtol=1e-7)


def _config(tmp_path, name="c.json", **kw):
    data = dict(SMALL)
    data.update(kw)
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def _run(tmp_path, out="out", **kw):
    code = main(["run", "--config", str(_config(tmp_path, **kw)), "--output-dir", str(tmp_path / out)])
    return code, tmp_path / out


class TestVerifyOperators:
    def test_pass(self, tmp_path, capsys):
        assert main(["verify-operators", "--degrees", "1-3", "--dims", "1,2", "--output-dir", str(tmp_path)]) == EXIT_OK
        report = json.loads((tmp_path / "operator_report.json").read_text())
        assert report["passed"] and len(report["entries"]) == 6
        assert capsys.readouterr().out.count("PASS") == 6

    @pytest.mark.parametrize("defect", ["skew", "accuracy", "weights"])
    def test_injected_defect_fails(self, tmp_path, defect):
        code = main(["verify-operators", "--degrees", "2", "--dims", "1", "--inject-defect", defect,
                     "--output-dir", str(tmp_path)])
        assert code == EXIT_FAILED
        assert not json.loads((tmp_path / "operator_report.json").read_text())["passed"]

    def test_unsupported_degree(self, tmp_path, capsys):
        assert main(["verify-operators", "--degrees", "13", "--output-dir", str(tmp_path)]) == EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err

    def test_dump_matrices(self, tmp_path):
        main(["verify-operators", "--degrees", "2", "--dims", "1", "--dump-matrices", "--output-dir", str(tmp_path)])
        assert (tmp_path / "matrices" / "p2" / "p2_D.txt").is_file()

    def test_bad_range(self):
        with pytest.raises(SystemExit):
            main(["verify-operators", "--degrees", "a-b"])


class TestRun:
    def test_outputs(self, tmp_path):
        code, out = _run(tmp_path)
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "completed" and summary["t_final"] == 0.05
        series = BalanceSeries.read_csv(out / "series.csv")
        assert len(series) == summary["n_steps"] + 1
        assert summary["max_relative_balance_residual"] <= 1e-12
        assert (out / "final_state.csv").read_text().splitlines()[0] == "element,node,x1,P,Q"

    def test_constant_equilibrium_stays(self, tmp_path):
        eq = equilibrium_from_mass(2.0, 10.0, 1.0)
        code, out = _run(tmp_path, dim=2, elements=[3, 3], t_end=0.2,
                         initial_condition={"kind": "constant", "state": [eq.P_eq, eq.Q_eq]})
        summary = json.loads((out / "summary.json").read_text())
        assert code == EXIT_OK
        assert max(summary["final_distance"]) <= 1e-12
        assert summary["T_eq"] == 0.0

    def test_balance_without_dissipation(self, tmp_path):
        code, out = _run(tmp_path, enable_diss_c=False, enable_diss_d=False)
        assert code == EXIT_OK
        series = BalanceSeries.read_csv(out / "series.csv")
        assert series.max_relative_residual <= 1e-12

    def test_summary_reruns_identically(self, tmp_path):
        _, out = _run(tmp_path)
        code = main(["run", "--config", str(out / "summary.json"), "--output-dir", str(tmp_path / "again")])
        assert code == EXIT_OK
        assert (out / "series.csv").read_bytes() == (tmp_path / "again" / "series.csv").read_bytes()

    def test_deterministic_repeat(self, tmp_path):
        _, a = _run(tmp_path, "a", dim=2, elements=[3, 3], threads=2)
        _, b = _run(tmp_path, "b", dim=2, elements=[3, 3], threads=2)
        for name in ("series.csv", "final_state.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_t_end_override(self, tmp_path):
        code = main(["run", "--config", str(_config(tmp_path)), "--output-dir", str(tmp_path / "o"),
                     "--t-end", "0.02"])
        assert code == EXIT_OK
        assert json.loads((tmp_path / "o" / "summary.json").read_text())["t_final"] == 0.02

    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        assert _run(tmp_path, dtfixed=0.1)[0] == EXIT_CONFIG
        assert "unknown" in capsys.readouterr().err

    def test_integration_failure_writes_state(self, tmp_path):
        code, out = _run(tmp_path, max_steps=3)
        assert code == EXIT_INTEGRATION
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "failed" and summary["t_final"] < 0.05

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "lyapcdr.cli", "verify-operators", "--degrees", "1",
                               "--dims", "1", "--output-dir", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0 and "PASS" in proc.stdout


class TestStudies:
    def test_mms_convergence(self, tmp_path):
        study = {"base": dict(SMALL, initial_condition={"kind": "mms", "wavenumber": 1.0}, t_end=0.1, atol=1e-10, rtol=1e-10),
                 "levels": [8, 16], "degrees": [2]}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(study))
        assert main(["mms-convergence", "--config", str(path), "--output-dir", str(tmp_path / "m")]) == EXIT_OK
        rows = (tmp_path / "m" / "mms_convergence.csv").read_text().splitlines()
        assert len(rows) == 3
        rate = float(rows[2].split(",")[6])
        assert rate > 2.5

    def test_mms_needs_manufactured_ic(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"base": SMALL, "levels": [2, 4]}))
        assert main(["mms-convergence", "--config", str(path), "--output-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_equilibrium_study(self, tmp_path):
        study = {"base": dict(SMALL, t_end=0.05, threshold=1e-8), "levels": [4, 6], "degrees": [1]}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(study))
        assert main(["equilibrium-study", "--config", str(path), "--output-dir", str(tmp_path / "e")]) == EXIT_OK
        rows = (tmp_path / "e" / "equilibrium_study.csv").read_text().splitlines()
        assert rows[1].split(",")[2] == "not reached"

    def test_equilibrium_study_reaches_threshold(self, tmp_path):
        study = {"base": dict(SMALL, t_end=1.0, threshold=1e-2,
                              initial_condition={"kind": "constant", "state": [1.0, 0.2]}),
                 "levels": [2, 3], "degrees": [1]}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(study))
        assert main(["equilibrium-study", "--config", str(path), "--output-dir", str(tmp_path / "e")]) == EXIT_OK
        t_eq = [float(r.split(",")[2]) for r in (tmp_path / "e" / "equilibrium_study.csv").read_text().splitlines()[1:]]
        # space-independent data: the same crossing on every mesh
        assert 0.0 < t_eq[0] < 1.0
        assert abs(t_eq[0] - t_eq[1]) <= 1e-4 * t_eq[0]

    def test_study_needs_config(self, tmp_path):
        assert main(["equilibrium-study", "--output-dir", str(tmp_path)]) == EXIT_CONFIG
