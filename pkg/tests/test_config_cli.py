import json

import numpy as np
import pytest

from anchorfed.cli import main
from anchorfed.config import ConfigError, apply_overrides, load_config


BASE_CONFIG = {
    "suite": {
        "n_clients": 3,
        "samples_per_client": 120,
        "num_classes": 3,
        "rotation_step_deg": 45.0,
        "seed": 0,
    },
    "distill": {"ipc": 5, "iterations": 25, "seed": 0},
    "run": {"rounds": 4, "seed": 0, "algorithm": "desa"},
}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(BASE_CONFIG))
    return p


class TestConfigParsing:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="lam_kdd"):
            load_config(None, overrides=["run.lam_kdd=1"])

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="rnu"):
            load_config(None, overrides=["rnu.rounds=1"])

    def test_negative_lambda_names_field(self):
        with pytest.raises(ConfigError, match="lam_kd"):
            load_config(None, overrides=["run.lam_kd=-1"])

    def test_overrides_and_seed(self, config_file):
        cfg = load_config(config_file, overrides=["run.lam_kd=0.5"], seed=42)
        assert cfg["run"].lam_kd == 0.5
        assert cfg["run"].seed == 42
        assert cfg["suite"].seed == 42

    def test_hash_is_stable_and_sensitive(self, config_file):
        a = load_config(config_file)
        b = load_config(config_file)
        c = load_config(config_file, overrides=["run.rounds=5"])
        assert a.hash == b.hash
        assert a.hash != c.hash

    def test_override_value_json_parsing(self):
        raw = apply_overrides({}, ["run.arch_ids=[\"arch-S\",\"arch-L\"]"])
        assert raw["run"]["arch_ids"] == ["arch-S", "arch-L"]


def run_pipeline(tmp_path, config_file, out_name="out"):
    out = tmp_path / out_name
    common = ["--config", str(config_file), "--out", str(out)]
    assert main(["gen-data", *common]) == 0
    assert main(["distill", *common]) == 0
    assert main(["run", *common]) == 0
    return out


class TestCli:
    def test_full_pipeline(self, tmp_path, config_file):
        out = run_pipeline(tmp_path, config_file)
        assert (out / "metrics.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["averaged_global_accuracy"] <= 1.0
        assert set(report["comm_by_kind"]) == {"anchors", "logits"}
        assert main(["eval", "--config", str(config_file), "--out", str(out)]) == 0
        assert (out / "accuracy_matrix.csv").exists()

    def test_rerun_is_byte_identical_except_timing(self, tmp_path, config_file):
        out1 = run_pipeline(tmp_path, config_file, "out1")
        out2 = run_pipeline(tmp_path, config_file, "out2")
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        r1 = json.loads((out1 / "report.json").read_text())
        r2 = json.loads((out2 / "report.json").read_text())
        r1.pop("timing"), r2.pop("timing")
        assert r1 == r2
        b1 = (out1 / "checkpoints" / "client_0.bin").read_bytes()
        b2 = (out2 / "checkpoints" / "client_0.bin").read_bytes()
        assert b1 == b2

    def test_invalid_config_exits_one(self, tmp_path, config_file, capsys):
        out = tmp_path / "o"
        rc = main(["run", "--config", str(config_file), "--out", str(out),
                   "--set", "run.lam_kd=-2"])
        assert rc == 1
        assert "lam_kd" in capsys.readouterr().err

    def test_misspelled_key_exits_one(self, tmp_path, config_file):
        rc = main(["gen-data", "--config", str(config_file),
                   "--out", str(tmp_path / "o"), "--set", "suite.n_cleints=4"])
        assert rc == 1

    def test_eval_refuses_hash_mismatch_without_force(self, tmp_path, config_file, capsys):
        out = run_pipeline(tmp_path, config_file)
        args = ["eval", "--config", str(config_file), "--out", str(out),
                "--set", "run.rounds=99"]
        assert main(args) == 1
        assert "hash" in capsys.readouterr().err
        assert main([*args, "--force"]) == 0

    def test_comm_audit_command(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"comm_audit": {
            "algorithm": "desa", "rounds": 100, "ipc": 50, "num_classes": 10,
            "logit_dim": 10, "anchor_record_floats": 3070,
        }}))
        out = tmp_path / "o"
        assert main(["comm-audit", "--config", str(cfg), "--out", str(out)]) == 0
        doc = json.loads((out / "comm_audit.json").read_text())
        assert doc["total"] == 2_035_000

    def test_grad_check_command(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "pass" in out and "FAIL" not in out

    def test_seed_flag_changes_outputs(self, tmp_path, config_file):
        out1 = tmp_path / "s1"
        out2 = tmp_path / "s2"
        for out, seed in ((out1, "1"), (out2, "2")):
            common = ["--config", str(config_file), "--out", str(out), "--seed", seed]
            assert main(["gen-data", *common]) == 0
        a = (out1 / "suite" / "client_0_train.csv").read_bytes()
        b = (out2 / "suite" / "client_0_train.csv").read_bytes()
        assert a != b
