import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from decomp_ips.cli import main
from decomp_ips.engines import report_from_json
from decomp_ips.tables import DenseTable, Schema, marginalize, table_from_json, table_to_csv, table_to_json

MODEL = [["H", "J"], ["J", "K"], ["K", "L"], ["H", "L"]]


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    s = Schema.uniform(list("HJKL"), 2)
    counts = rng.integers(1, 100, size=s.shape).astype(float)
    (tmp_path / "data.json").write_text(table_to_json(DenseTable(s, counts)))
    (tmp_path / "data.csv").write_text(table_to_csv(DenseTable(s, counts)))
    (tmp_path / "model.json").write_text(json.dumps(MODEL))
    (tmp_path / "tri.json").write_text(json.dumps([["H", "J", "K"], ["K", "L"]]))
    return tmp_path


def _run(*args):
    return main([str(a) for a in args])


class TestFit:
    @pytest.mark.parametrize("algo", ["conventional", "submodel", "submodel-alpha0", "submodel-fixed:0.8", "cycle-tree"])
    def test_converges_and_matches_edges(self, files, algo):
        out = files / "rep.json"
        code = _run("fit", "--data", files / "data.json", "--model", files / "model.json", "--algorithm", algo,
                    "--tol", "1e-8", "--out", out)
        assert code == 0
        rep = report_from_json(out.read_text())
        r = table_from_json((files / "data.json").read_text())
        for g in MODEL:
            np.testing.assert_allclose(marginalize(rep.p_hat, g).values, marginalize(r, g).values, atol=1e-7)

    def test_auto_span_and_csv_input(self, files):
        out = files / "rep.json"
        assert _run("fit", "--data", files / "data.csv", "--model", files / "model.json",
                    "--algorithm", "submodel", "--auto-span", "--out", out) == 0
        assert json.loads(out.read_text())["algorithm"] == "submodel"

    def test_round_trip_bit_exact(self, files, capsys):
        assert _run("fit", "--data", files / "data.json", "--model", files / "model.json") == 0
        text = capsys.readouterr().out
        rep = report_from_json(text)
        again = report_from_json(json.dumps(json.loads(text)))
        np.testing.assert_array_equal(rep.p_hat.values, again.p_hat.values)
        assert rep.p_hat.flat.tolist() == json.loads(text)["fitted"]

    def test_csv_output(self, files, capsys):
        assert _run("fit", "--data", files / "data.json", "--model", files / "model.json", "--format", "csv") == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 16 and sum(float(r["probability"]) for r in rows) == pytest.approx(1)

    def test_fixed_zero_nonconvergence(self, files):
        assert _run("fit", "--data", files / "data.json", "--model", files / "model.json",
                    "--algorithm", "submodel-fixed:0", "--max-cycles", "5", "--out", files / "o.json") == 2

    def test_cycle_tree_needs_cycle(self, files):
        assert _run("fit", "--data", files / "data.json", "--model", files / "tri.json", "--algorithm", "cycle-tree") == 1

    def test_input_errors(self, files):
        assert _run("fit", "--data", files / "missing.json", "--model", files / "model.json") == 1
        (files / "bad.json").write_text("{not json")
        assert _run("fit", "--data", files / "bad.json", "--model", files / "model.json") == 1
        assert _run("fit", "--data", files / "data.json", "--model", files / "model.json", "--algorithm", "magic") == 1
        (files / "m2.json").write_text(json.dumps([["H", "Z"]]))
        assert _run("fit", "--data", files / "data.json", "--model", files / "m2.json") == 1

    def test_bad_submodels(self, files, capsys):
        (files / "fam.json").write_text(json.dumps([[["H", "J"], ["J", "K"], ["K", "L"]]]))
        assert _run("fit", "--data", files / "data.json", "--model", files / "model.json",
                    "--algorithm", "submodel", "--submodels", files / "fam.json") == 1
        assert '"uncovered"' in capsys.readouterr().err

    def test_model_subset_of_data(self, files):
        (files / "m3.json").write_text(json.dumps([["H", "J"], ["J", "K"]]))
        assert _run("fit", "--data", files / "data.json", "--model", files / "m3.json", "--out", files / "o.json") == 0


class TestUsage:
    def test_missing_data(self, files):
        with pytest.raises(SystemExit) as exc:
            _run("fit", "--model", files / "model.json")
        assert exc.value.code == 1

    def test_unknown_flag(self, files):
        with pytest.raises(SystemExit) as exc:
            _run("span", "--model", files / "model.json", "--bogus")
        assert exc.value.code == 1

    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            _run()
        assert exc.value.code == 1

    def test_module_entry_point(self, files):
        proc = subprocess.run(
            [sys.executable, "-m", "decomp_ips", "span", "--model", str(files / "model.json")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0 and json.loads(proc.stdout)["validation"]["ok"]


class TestSpan:
    def test_four_cycle(self, files, capsys):
        assert _run("span", "--model", files / "model.json") == 0
        obj = json.loads(capsys.readouterr().out)
        assert [len(m) for m in obj["members"]] == [3, 3]

    def test_decomposable_is_itself(self, files, capsys):
        assert _run("span", "--model", files / "tri.json") == 0
        assert json.loads(capsys.readouterr().out)["members"] == [[["H", "J", "K"], ["K", "L"]]]

    def test_eight_cycle_and_reuse(self, files, capsys):
        names = [f"v{k}" for k in range(8)]
        model = [[names[k], names[(k + 1) % 8]] for k in range(8)]
        (files / "c8.json").write_text(json.dumps(model))
        assert _run("span", "--model", files / "c8.json", "--out", files / "fam8.json") == 0
        assert json.loads((files / "fam8.json").read_text())["validation"]["ok"]
        rng = np.random.default_rng(1)
        s = Schema.uniform(names, 2)
        (files / "d8.json").write_text(table_to_json(DenseTable(s, rng.integers(1, 50, size=s.shape).astype(float))))
        assert _run("fit", "--data", files / "d8.json", "--model", files / "c8.json", "--algorithm", "submodel",
                    "--submodels", files / "fam8.json", "--out", files / "o.json") == 0

    def test_markdown(self, files, capsys):
        assert _run("span", "--model", files / "model.json", "--format", "markdown") == 0
        assert "| 1 | HJ, JK, KL |" in capsys.readouterr().out


class TestBench:
    def test_markdown_stdout(self, capsys):
        assert _run("bench", "--dims", "8", "--levels", "2", "--replicates", "20", "--seed", "7") == 0
        out = capsys.readouterr().out
        assert "| 8 |" in out and "seed = 7" in out
        row = next(line for line in out.splitlines() if line.startswith("| 8 |"))
        assert row.split("|")[5].strip() == "9.000" and row.split("|")[6].strip() == "3.000"

    def test_files(self, tmp_path):
        assert _run("bench", "--dims", "4..5", "--levels", "2,3", "--replicates", "3",
                    "--out", tmp_path / "s.csv", "--markdown", tmp_path / "t.md", "--records", tmp_path / "r.csv") == 0
        assert len((tmp_path / "s.csv").read_text().splitlines()) == 5
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 4 * 3 * 2
        assert "### I = 3" in (tmp_path / "t.md").read_text()

    def test_bad_range(self):
        with pytest.raises(SystemExit) as exc:
            _run("bench", "--dims", "four")
        assert exc.value.code == 1
        assert _run("bench", "--dims", "3", "--replicates", "1") == 1


class TestAnalyzeAlpha:
    def test_csv(self, files, capsys):
        assert _run("analyze-alpha", "--data", files / "data.json", "--model", files / "model.json",
                    "--grid", "0:2:0.5", "--diagnostics", files / "d.json") == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["alpha", "log_g", "kl_decrease"]
        assert [float(x) for x in rows[1]] == [0.0, 0.0, 0.0]
        assert len(rows) == 6
        diag = json.loads((files / "d.json").read_text())
        assert diag["alpha0_exact"] > 0 and diag["epsilon"] > 0

    def test_json_member_two(self, files, capsys):
        assert _run("analyze-alpha", "--data", files / "data.json", "--model", files / "model.json",
                    "--member", "2", "--delta", "0.005", "--format", "json") == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["member"] == 2 and obj["curves"][0]["log_g"] == 0.0

    def test_member_out_of_range(self, files):
        assert _run("analyze-alpha", "--data", files / "data.json", "--model", files / "model.json", "--member", "3") == 1
