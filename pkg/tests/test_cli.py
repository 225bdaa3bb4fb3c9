import csv
import json

import pytest

from lupi.cli import EXIT_DIVERGED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, default_document, main

TINY = {
    "gen": {"num_classes": 3, "grid": 6, "support": 6, "fragments": 1, "fragment_size": 2, "jitter": 1},
    "train": {"max_epochs": 2, "mc_samples": 1},
    "arch": {"input_dim": 36, "num_classes": 3, "trunk": [8], "head_hidden": 6, "var_hidden": 4},
    "experiment": {"pool_size": 120, "sizes": [20, 40], "seeds": [0, 1], "fractions": [0.0, 1.0],
                   "fraction_n": 20, "diagnostics_n": 20},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def files_in(d):
    return sorted(p.name for p in d.iterdir())


class TestBounds:
    def test_prop1_prints_worked_value(self, capsys):
        assert main("bounds prop1 --lambda 2 --eps 0.1 --L 1 --K 10 --delta 0.05 --n 100".split()) == EXIT_OK
        assert capsys.readouterr().out.strip() == "0.6456"

    def test_prop2(self, capsys):
        argv = "bounds prop2 --C 10 --xi 0.05 --M_w 2 --M_z 1 --P 1000 --delta 0.05 --n 1000".split()
        assert main(argv) == EXIT_OK
        assert capsys.readouterr().out.strip() == "0.17282"

    def test_prop2_side_condition_is_runtime_error(self, capsys):
        argv = "bounds prop2 --C 10 --xi 0.5 --M_w 2 --M_z 1 --P 1000 --delta 0.05 --n 1000".split()
        assert main(argv) == EXIT_RUNTIME
        assert "xi" in capsys.readouterr().err

    def test_csv_output(self, tmp_path):
        assert main(["bounds", "cover", "--dim", "1", "--diameter", "1", "--eps", "0.25", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "bounds.csv")))
        assert rows[0] == ["op", "dim", "diameter", "eps", "value"]
        assert rows[1][0] == "cover" and rows[1][-1] == "2"
        assert (tmp_path / "run.json").exists()

    def test_paths_and_bernstein(self, capsys):
        assert main(["bounds", "paths", "--seed", "3"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["max_abs_error"] < 1e-10
        assert main(["bounds", "bernstein", "--trials", "500"]) == EXIT_OK
        assert "empirical_violation_rate" in capsys.readouterr().out

    def test_ratefit_needs_file(self, tmp_path):
        assert main(["bounds", "ratefit", "--gaps", str(tmp_path / "missing.csv"), "--model", "lupi"]) == EXIT_RUNTIME


class TestUsage:
    def test_unknown_flag_echoed(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--bogus", "1"]) == EXIT_USAGE
        assert "--bogus" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["fly"]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert main(["train", "--out", str(tmp_path / "o"), "--config", str(bad)]) == EXIT_USAGE
        assert "train.learning_rate" in capsys.readouterr().err

    def test_invalid_value_names_field(self, tmp_path, config, capsys):
        assert main(["train", "--out", str(tmp_path), "--config", config, "--train.patience", "0"]) == EXIT_USAGE
        assert "patience" in capsys.readouterr().err

    def test_missing_required(self, capsys):
        assert main(["bounds", "prop1", "--lambda", "2"]) == EXIT_USAGE

    def test_default_document_sections(self):
        assert set(default_document()) == {"gen", "train", "arch", "experiment", "run"}


class TestRuns:
    def test_train_writes_under_out(self, tmp_path, config):
        out = tmp_path / "run"
        assert main(["train", "--model", "lupi", "--out", str(out), "--config", config]) == EXIT_OK
        assert files_in(out) == ["checkpoint.json", "final.json", "metrics.csv", "run.json"]
        run = json.loads((out / "run.json").read_text())
        assert run["command"] == "train" and run["config"]["run"]["model"] == "lupi"
        assert {"numpy", "lupi", "python"} <= set(run["versions"])
        assert files_in(tmp_path) == ["run", "tiny.json"]

    def test_dotted_override_beats_file(self, tmp_path, config):
        out = tmp_path / "o"
        main(["train", "--out", str(out), "--config", config, "--train.max_epochs", "1"])
        assert json.loads((out / "run.json").read_text())["config"]["train"]["max_epochs"] == 1

    def test_env_seed(self, tmp_path, config, monkeypatch):
        monkeypatch.setenv("LUPI_SEED", "17")
        out = tmp_path / "o"
        main(["train", "--out", str(out), "--config", config])
        assert json.loads((out / "run.json").read_text())["seeds"] == [17]
        main(["train", "--out", str(out), "--config", config, "--seed", "4"])
        assert json.loads((out / "run.json").read_text())["seeds"] == [4]

    def test_lr_zero_metrics_constant(self, tmp_path, config):
        out = tmp_path / "o"
        assert main(["train", "--out", str(out), "--config", config, "--train.lr", "0"]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "metrics.csv")))
        assert len({r["top1"] for r in rows if r["split"] == "val"}) == 1

    def test_diverged_exit_code(self, tmp_path, config):
        argv = ["train", "--model", "noxstar", "--out", str(tmp_path / "o"), "--config", config,
                "--train.lr", "1e6", "--train.optimizer", "sgd"]
        assert main(argv) == EXIT_DIVERGED

    def test_gen_eval_diagnostics(self, tmp_path, config, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", config, "--n", "30"]) == EXIT_OK
        assert main(["train", "--out", str(tmp_path / "t"), "--config", config]) == EXIT_OK
        ck = str(tmp_path / "t" / "checkpoint.json")
        data = str(tmp_path / "d" / "dataset.json")
        assert main(["eval", "--out", str(tmp_path / "e"), "--config", config, "--checkpoint", ck,
                     "--data", data]) == EXIT_OK
        assert "top1" in json.loads((tmp_path / "e" / "eval.json").read_text())
        assert main(["diagnostics", "--out", str(tmp_path / "g"), "--config", config, "--checkpoint", ck]) == EXIT_OK
        header = (tmp_path / "g" / "diagnostics.csv").read_text().splitlines()[0]
        assert header == "unit_index,group,mean_sigma,count"

    def test_rerun_from_run_json_is_bit_identical(self, tmp_path, config):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["sweep-xstar", "--out", str(a), "--config", config]) == EXIT_OK
        assert main(["sweep-xstar", "--out", str(b), "--config", str(a / "run.json"), "--jobs", "2"]) == EXIT_OK
        for name in ("sweep_xstar.csv", "sweep_xstar_gaps.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
