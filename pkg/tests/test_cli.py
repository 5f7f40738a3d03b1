import json
import math

import pytest

from icicl.cli import main
from icicl.config import ExperimentConfig
from icicl.errors import ConfigError

TINY_MODEL = {"d_z": 8, "n_layers": 1, "n_heads": 2, "d_v": 4, "d_qk": 4, "n_pseudo": 3,
              "n_pseudo_ic": 3, "cnp_encoder_layers": 2}
TINY_TASKS = {"kind": "synthetic", "n_context": [1, 8], "n_target": 8, "n_ic": [0, 2],
              "n_ic_points": [4, 8]}


def write_config(tmp_path, **overrides):
    cfg = {"seed": 4, "out_dir": str(tmp_path / "run"), "model": {"kind": "cnp", **TINY_MODEL},
           "train": {"epochs": 1, "iterations": 3, "batch_size": 2}, "task": TINY_TASKS,
           "eval": {"n_tasks": 9},
           "bench": {"kinds": ["pt_tnp"], "n_context": [8, 16], "n_target": 4, "repeats": 1},
           "theorem": {"n_tasks": 5, "n_samples": 1000, "n_ell": 2}}
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfig:
    def test_seed_mandatory(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"out_dir": "x"})

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seed": 1, "optimiser": {}})

    def test_seed_propagates(self):
        cfg = ExperimentConfig.from_dict({"seed": 7})
        assert cfg.model.seed == 7 and cfg.train.seed == 7 and cfg.eval["seed"] == 1007

    def test_snapshot_round_trip(self):
        cfg = ExperimentConfig.from_dict({"seed": 2, "model": {"kind": "pt_tnp"}})
        again = ExperimentConfig.from_dict(json.loads(cfg.snapshot()))
        assert again.snapshot() == cfg.snapshot()

    def test_data_dir_from_environment(self, monkeypatch):
        monkeypatch.setenv("ICICL_DATA_DIR", "/some/where")
        assert ExperimentConfig.from_dict({"seed": 1}).data_dir == "/some/where"


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert main(["train"]) == 2
        assert main(["frobnicate"]) == 2
        assert main(["verify-theorem", "--seed", "1", "--out", str(tmp_path), "--n-tasks", "0"]) == 2
        assert "n_tasks must be positive" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        bad = write_config(tmp_path, model={"kind": "anp"})
        assert main(["train", "--config", bad]) == 2
        assert "unknown model kind" in capsys.readouterr().err
        (tmp_path / "broken.json").write_text("{not json")
        assert main(["gen", "--config", str(tmp_path / "broken.json")]) == 2

    def test_missing_data(self, tmp_path, monkeypatch):
        monkeypatch.delenv("ICICL_DATA_DIR", raising=False)
        cfg = write_config(tmp_path, task={"kind": "image"})
        assert main(["gen", "--config", cfg, "--data-dir", str(tmp_path / "nowhere")]) == 3


class TestCommands:
    def test_gen_is_reproducible(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen", "--config", cfg]) == 0
        first = (tmp_path / "run" / "tasks" / "eval.cache").read_bytes()
        assert main(["gen", "--config", cfg]) == 0
        assert (tmp_path / "run" / "tasks" / "eval.cache").read_bytes() == first
        manifest = json.loads((tmp_path / "run" / "tasks" / "manifest.json").read_text())
        assert manifest["n_tasks"] == 9 and len(manifest["config_hash"]) == 64

    def test_hash_mismatch_refused(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["gen", "--config", cfg]) == 0
        changed = write_config(tmp_path, task={**TINY_TASKS, "n_target": 9})
        assert main(["eval", "--config", changed]) == 2
        assert "different config" in capsys.readouterr().err

    def test_train_then_eval(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen", "--config", cfg]) == 0
        assert main(["train", "--config", cfg]) == 0
        run = tmp_path / "run"
        for name in ("config.snapshot", "metrics.csv", "report.txt", "eval/final.csv",
                     "checkpoints/final.ckpt"):
            assert (run / name).exists(), name
        assert main(["eval", "--config", cfg]) == 0
        first = (run / "eval" / "cnp.csv").read_text()
        assert main(["eval", "--config", cfg]) == 0
        assert (run / "eval" / "cnp.csv").read_text() == first
        assert first == (run / "eval" / "final.csv").read_text()

    def test_untrained_cnp_report_is_finite(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg]) == 0
        rows = (tmp_path / "run" / "eval" / "cnp.csv").read_text().splitlines()[1:]
        assert all(math.isfinite(float(r.split(",")[1])) for r in rows)

    def test_oracle_eval(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--oracle"]) == 0
        assert (tmp_path / "run" / "eval" / "oracle.csv").exists()

    def test_flags_override_file(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "other"
        assert main(["train", "--config", cfg, "--out", str(out), "--iterations", "2", "--kind",
                     "pt_tnp"]) == 0
        snap = json.loads((out / "config.snapshot").read_text())
        assert snap["train"]["iterations"] == 2 and snap["model"]["kind"] == "pt_tnp"
        assert len((out / "metrics.csv").read_text().splitlines()) == 3

    def test_training_metrics_reproducible(self, tmp_path):
        cfg = write_config(tmp_path)
        runs = []
        for name in ("a", "b"):
            assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
            lines = (tmp_path / name / "metrics.csv").read_text().splitlines()
            runs.append([l.rsplit(",", 1)[0] for l in lines])
        assert runs[0] == runs[1]
        assert (tmp_path / "a" / "eval" / "final.csv").read_bytes() == \
            (tmp_path / "b" / "eval" / "final.csv").read_bytes()

    def test_verify_theorem(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["verify-theorem", "--config", cfg]) == 0
        assert "result = PASS" in capsys.readouterr().out
        assert main(["verify-theorem", "--config", cfg, "--singleton"]) == 0
        report = (tmp_path / "run" / "report.txt").read_text()
        assert "lhs = 0.000000" in report and "rhs = 0.000000" in report

    def test_bench_columns(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["bench", "--config", cfg]) == 0
        lines = (tmp_path / "run" / "bench.csv").read_text().splitlines()
        assert lines[0] == "model,N_c,N_t,N_ic,flops,wall_ms"
        rows = [l.split(",") for l in lines[1:]]
        assert [r[0] for r in rows] == ["pt_tnp", "pt_tnp", "full_tnp", "full_tnp"]
        assert float(rows[0][5]) > 0 and rows[2][5] == ""

    def test_image_tasks_from_environment(self, tmp_path, mnist_dir, monkeypatch):
        monkeypatch.setenv("ICICL_DATA_DIR", mnist_dir)
        cfg = write_config(tmp_path, task={"kind": "image", "n_ic": [0, 1]},
                           model={"kind": "icicl_tnp", **TINY_MODEL, "d_x": 2},
                           train={"epochs": 1, "iterations": 2, "batch_size": 2},
                           eval={"n_tasks": 4})
        assert main(["train", "--config", cfg]) == 0
        rows = (tmp_path / "run" / "eval" / "final.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["all", "0", "1"]
