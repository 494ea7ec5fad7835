"""End-to-end tests of the config-driven command-line surface."""

import json

import pytest

from distill_lab.cli import apply_overrides, config_hash, main, validate_config
from distill_lab.errors import ConfigError
from distill_lab.training import METRICS_HEADER


def write_config(path, cfg):
    path.write_text(json.dumps(cfg) + "\n")
    return str(path)


BASE = {
    "seed": 7,
    "source": {"name": "bimodal_gap"},
    "corpus": {"num_seqs": 20, "length": 24},
    "student_order": 1,
    "train": {"objective": "hpd", "steps": 30, "eval_every": 10, "lr": 0.5,
              "batch_size": 8, "n_eval_seqs": 4, "eval_len": 8},
}


class TestConfigHandling:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            validate_config({"seed": 1, "bogus": 2})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError):
            validate_config({"seed": 1, "train": {"objective": "sft", "nope": 1}})

    def test_seed_required_and_integer(self):
        with pytest.raises(ConfigError):
            validate_config({})
        with pytest.raises(ConfigError):
            validate_config({"seed": "seven"})

    def test_overrides_parse_json_values(self):
        cfg = apply_overrides({"seed": 1}, ["train.lr=0.25", "train.objective=sft"])
        assert cfg["train"]["lr"] == 0.25
        assert cfg["train"]["objective"] == "sft"

    def test_override_requires_equals(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["oops"])

    def test_config_hash_stable_and_order_independent(self):
        a = config_hash({"seed": 1, "train": {"lr": 0.1}})
        b = config_hash({"train": {"lr": 0.1}, "seed": 1})
        assert a == b and len(a) == 12


class TestCommands:
    def test_gen_source_and_corpus(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = dict(BASE, out_dir="out")
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["gen-source", "--config", path]) == 0
        assert main(["gen-corpus", "--config", path]) == 0
        assert (tmp_path / "out" / "source.json").exists()
        corpus_lines = (tmp_path / "out" / "corpus.txt").read_text().splitlines()
        assert len(corpus_lines) == 1 + 20
        header = json.loads(corpus_lines[0])
        assert header["seed"] == 7 and "config_hash" in header

    def test_distill_writes_metrics_checkpoint_and_sidecar(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.json", dict(BASE, out_dir="out"))
        assert main(["distill", "--config", path]) == 0
        csv = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert csv[0].startswith("# ")
        assert csv[1] == METRICS_HEADER
        assert len(csv) == 2 + 3  # eval rows at steps 10, 20, 30
        assert (tmp_path / "out" / "student.json").exists()
        assert (tmp_path / "out" / "distill_effective_config.json").exists()

    def test_distill_same_seed_byte_identical(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.json", dict(BASE, out_dir="out"))
        assert main(["distill", "--config", path]) == 0
        first_csv = (tmp_path / "out" / "metrics.csv").read_bytes()
        first_ckpt = (tmp_path / "out" / "student.json").read_bytes()
        assert main(["distill", "--config", path]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_bytes() == first_csv
        assert (tmp_path / "out" / "student.json").read_bytes() == first_ckpt

    def test_override_changes_run(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.json", dict(BASE, out_dir="out"))
        assert main(["distill", "--config", path, "--set", "train.objective=sft"]) == 0
        csv = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert csv[2].split(",")[1] == "sft"

    def test_opd_requires_on_policy_objective(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.json", dict(BASE, out_dir="out"))
        assert main(["opd", "--config", path]) == 2
        assert "error:" in capsys.readouterr().err

    def test_opd_runs(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = dict(BASE, out_dir="out")
        cfg["train"] = dict(BASE["train"], objective="opd_k1", horizon=4)
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["opd", "--config", path]) == 0
        csv = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert csv[2].split(",")[1] == "opd_k1"
        assert csv[2].split(",")[7] != ""  # mean_reward recorded

    def test_train_teacher(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.json", dict(BASE, out_dir="out"))
        assert main(["train-teacher", "--config", path]) == 0
        doc = json.loads((tmp_path / "out" / "teacher.json").read_text())
        assert doc["order"] == 2  # defaults to the source order
        assert doc["rows"]

    def test_eval_command(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = dict(BASE, out_dir="out", tasks={"num_tasks": 10, "cont_len": 1})
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["eval", "--config", path]) == 0
        lines = (tmp_path / "out" / "audit.csv").read_text().splitlines()
        assert lines[1] == "kl_fwd,kl_rev,mean_entropy,accuracy"
        vals = lines[2].split(",")
        assert float(vals[0]) >= 0.0 and float(vals[1]) >= 0.0

    def test_gradcheck_command_exits_zero(self, capsys):
        assert main(["gradcheck", "--set", "seed=0"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out

    def test_stages_pipeline(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = dict(BASE, out_dir="out")
        cfg["stages"] = [
            {"name": "warm", "objective": "sft", "steps": 20, "eval_every": 10},
            {"name": "polish", "objective": "opd_k1", "steps": 20, "eval_every": 10,
             "horizon": 4},
        ]
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["distill", "--config", path]) == 0
        warm = (tmp_path / "out" / "metrics_warm.csv").read_text().splitlines()
        polish = (tmp_path / "out" / "metrics_polish.csv").read_text().splitlines()
        assert warm[2].split(",")[0] == "10"
        assert polish[-1].split(",")[0] == "40"
        assert (tmp_path / "out" / "student.json").exists()

    def test_sweep_writes_grid_of_csvs(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = dict(BASE, out_dir="out")
        cfg["train"] = dict(BASE["train"], steps=10, eval_every=10)
        cfg["sweep"] = {
            "objectives": ["sft", "fkld_dense", "rkld_off", "jsd_off", "hpd"],
            "seeds": [0, 1, 2, 3, 4],
        }
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["sweep", "--config", path]) == 0
        csvs = sorted((tmp_path / "out").glob("metrics_*_seed*.csv"))
        assert len(csvs) == 25
        for f in csvs:
            assert f.read_text().splitlines()[1] == METRICS_HEADER

    def test_missing_config_file_exits_two(self, capsys):
        assert main(["distill", "--config", "/nonexistent/cfg.json"]) == 2

    def test_bad_config_key_exits_two(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", {"seed": 1, "wat": 2})
        assert main(["distill", "--config", str(path)]) == 2
