import json

import numpy as np
import pytest

from conftest import CONFIGS, load_config
from dacood import bench, cli, data
from dacood.bench import ConfigError, EvalReport, ExperimentConfig, ExperimentError, ReportRow

QUICK_TRAIN = {"hidden_dims": [16], "epochs": 3, "batch_size": 64, "seed": 0}


def quick_config(out_dir, **overrides):
    raw = load_config("synthetic.json", out_dir, seeds=[0, 1], train=QUICK_TRAIN)
    raw.update(overrides)
    return raw


def run(raw):
    return bench.run_experiment(ExperimentConfig.from_dict(raw, base_dir=CONFIGS))


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    return out, run(load_config("synthetic.json", out))


class TestRunExperiment:
    def test_abstention_beats_max_softmax_everywhere(self, benchmark):
        _, report = benchmark
        for name in ("cluster4", "far_box"):
            assert report.row(name, "abstention").auroc_mean > report.row(name, "max_softmax").auroc_mean

    def test_outputs(self, benchmark):
        out, report = benchmark
        names = {p.name for p in out.iterdir()}
        assert {"report.csv", "report.md", "report.json", "model_0.bin", "model_4.bin"} <= names
        assert "scores_2_far_box_abstention.csv" in names
        assert "hist_2_far_box_abstention_id.csv" in names and "hist_2_far_box_abstention_ood.csv" in names
        assert not any(n.startswith(".") for n in names)
        back = bench.load_report(out)
        assert back.rows == report.rows
        assert set(report.id_accuracy) == {"0", "1", "2", "3", "4"}

    def test_score_dump_is_balanced(self, benchmark):
        out, _ = benchmark
        d = data.load_csv(out / "scores_0_cluster4_max_softmax.csv", "is_ood")
        assert (d.y == 0).sum() == (d.y == 1).sum() == 300
        assert d.X[:, 0].tolist() == list(range(600))

    def test_byte_identical_rerun(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run(quick_config(a))
        run(quick_config(b))
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        for name in files:
            # report.json echoes the output directory
            if name != "report.json":
                assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_single_seed_std_zero(self, tmp_path):
        report = run(quick_config(tmp_path, seeds=[3]))
        assert all(r.auroc_std == 0 and r.fpr95_std == 0 and r.n_seeds == 1 for r in report.rows)

    def test_std_is_sample_std(self, tmp_path):
        report = run(quick_config(tmp_path, seeds=[0, 1, 2]))
        for r in report.rows:
            assert r.auroc_std == pytest.approx(np.std(r.auroc_per_seed, ddof=1), abs=1e-15)

    def test_seed_failure_names_seed(self, tmp_path):
        raw = quick_config(tmp_path)
        raw["ood_test_sets"] = [{"name": "gone", "csv": {"path": str(tmp_path / "missing.csv")}}]
        with pytest.raises(ExperimentError, match="seed 0"):
            run(raw)

    def test_delta_rates(self, tmp_path):
        report = run(quick_config(tmp_path, seeds=[0], delta=0.5))
        rates = report.delta_rates["far_box/abstention"]["0"]
        assert 0 <= rates["tpr"] <= 1 and 0 <= rates["fpr"] <= 1

    def test_env_output_dir_fallback(self, tmp_path, monkeypatch):
        raw = quick_config(tmp_path)
        del raw["output_dir"]
        monkeypatch.setenv(bench.OUTPUT_DIR_ENV, str(tmp_path / "env"))
        assert ExperimentConfig.from_dict(raw).resolve_output_dir() == tmp_path / "env"
        raw["output_dir"] = str(tmp_path / "cfg")
        assert ExperimentConfig.from_dict(raw).resolve_output_dir() == tmp_path / "cfg"


class TestConfigErrors:
    @pytest.mark.parametrize(
        "change,message",
        [
            ({"ood_test_sets": []}, "at least one OoD"),
            ({"ood_test_sets": [{"name": "ring", "synthetic": {"kind": "uniform_box", "n": 5}}]}, "collides"),
            ({"detectors": [{"kind": "abstention"}, {"kind": "abstention"}]}, "duplicate detector"),
            ({"detectors": [{"kind": "odin", "temperature": 1000}]}, "epsilon"),
            ({"seeds": []}, "seeds"),
            ({"bogus": 1}, "unknown config keys"),
            ({"train": {"learning_rate": -1}}, "train"),
        ],
    )
    def test_rejected(self, tmp_path, change, message):
        raw = quick_config(tmp_path, **change)
        with pytest.raises(ConfigError, match=message):
            ExperimentConfig.from_dict(raw)

    def test_load_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            ExperimentConfig.load(tmp_path / "nope.json")


def sample_report(n_sets=3, detectors=("abstention", "max_softmax")):
    rng = np.random.default_rng(0)
    rows = [
        ReportRow(f"set{i}", d, *rng.random(4).tolist(), 5)
        for i in range(n_sets)
        for d in detectors
    ]
    return EvalReport("demo", rows)


class TestEmitTable:
    def test_row_count(self):
        text = bench.emit_table(sample_report(), "csv")
        assert len(text.strip().split("\n")) == 1 + 6
        md = bench.emit_table(sample_report(), "markdown")
        assert sum(line.startswith("| set") for line in md.split("\n")) == 6

    def test_full_precision_round_trip(self):
        report = sample_report()
        back = bench.parse_table_csv(bench.emit_table(report, "csv"))
        for a, b in zip(report.rows, back.rows):
            assert (a.auroc_mean, a.auroc_std, a.fpr95_mean, a.fpr95_std) == (
                b.auroc_mean, b.auroc_std, b.fpr95_mean, b.fpr95_std,
            )

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            bench.emit_table(sample_report(), "html")


class TestDumpScores:
    def test_lines_and_flags(self, tmp_path):
        p = bench.dump_scores(tmp_path / "s.csv", [0, 1, 2], [0.1, 0.5, 0.9], [0, 1, 1])
        lines = p.read_text().split("\n")[:-1]
        assert len(lines) == 4 and lines[0] == "sample_id,score,is_ood"
        assert {line.rsplit(",", 1)[1] for line in lines[1:]} <= {"0", "1"}

    def test_bad_flag(self, tmp_path):
        with pytest.raises(ValueError):
            bench.dump_scores(tmp_path / "s.csv", [0], [0.1], [2])

    def test_io_error_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="file"):
            bench.dump_scores(blocker / "s.csv", [0], [0.1], [0])


class TestCli:
    def test_run_missing_config(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 1
        assert "missing.json" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["run", "--frobnicate"])
        assert e.value.code == 2

    def test_self_test(self, capsys):
        assert cli.main(["self-test"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_run_and_report(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        raw = quick_config(tmp_path / "out", seeds=[0])
        cfg.write_text(json.dumps(raw))
        assert cli.main(["run", "--config", str(cfg)]) == 0
        capsys.readouterr()
        assert cli.main(["report", "--in", str(tmp_path / "out"), "--format", "csv"]) == 0
        assert capsys.readouterr().out == (tmp_path / "out" / "report.csv").read_text()
        assert cli.main(["report", "--in", str(tmp_path / "out" / "report.csv"), "--format", "md"]) == 0
        assert "| far_box | abstention |" in capsys.readouterr().out

    def test_gen_data(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"kind": "ring", "n": 40, "seed": 1, "r_inner": 1, "r_outer": 2}))
        assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "ring.csv")]) == 0
        d = data.load_csv(tmp_path / "ring.csv", "y")
        assert d.n == 40 and (d.y == 1).all()

    def test_gen_data_bad_spec(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"kind": "ring", "n": 4, "r_inner": 3, "r_outer": 1}))
        assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "x.csv")]) == 1
        assert "error" in capsys.readouterr().err
