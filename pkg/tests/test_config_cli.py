import json
import subprocess
import sys
from pathlib import Path

import pytest

from bellman_resnet.cli import appendix_closed_forms, main
from bellman_resnet.config import ConfigError, ExperimentConfig, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestConfig:
    @pytest.mark.parametrize("name", ["appendix_e", "appendix_e_vi30", "ou_1d", "zero"])
    def test_shipped_configs_load(self, name):
        cfg = load_config(CONFIGS / f"{name}.toml")
        assert cfg.build_spec() is not None

    def test_unknown_key_named(self, tmp_path):
        p = write(tmp_path, "[grid]\nstate_nodez = 11\n")
        with pytest.raises(ConfigError, match="grid.state_nodez"):
            load_config(p)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="'gird'"):
            parse_config({"gird": {}})

    def test_bad_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config({"seed": -1})

    def test_bad_spec(self):
        with pytest.raises(ConfigError, match=r"\[spec\]"):
            parse_config({"spec": {"problem": "appendix_e", "params": {"gamma": 2.0}}})

    def test_malformed_toml(self, tmp_path):
        with pytest.raises(ConfigError, match="malformed"):
            load_config(write(tmp_path, "[grid\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.toml")

    def test_digest_tracks_content(self):
        a = ExperimentConfig()
        assert a.digest == ExperimentConfig().digest
        assert a.digest != a.with_overrides(seed=1).digest

    def test_train_config_carries_seed(self):
        cfg = parse_config({"seed": 4, "training": {"epochs": 3, "hidden": [8]}})
        tc = cfg.train_config()
        assert tc.seed == 4 and tc.epochs == 3 and tc.hidden == (8,)


class TestCli:
    def test_malformed_config_exit_2(self, tmp_path, capsys):
        p = write(tmp_path, "[grid]\nstate_nodez = 11\n")
        assert main(["value-iterate", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
        assert "grid.state_nodez" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["value-iterate", "--out-dir", str(tmp_path)]) == 2

    def test_reproduce_walk(self, tmp_path):
        assert main(["reproduce-appendix", "--out-dir", str(tmp_path)]) == 0
        rows = (tmp_path / "appendix_e_iterates.csv").read_text().splitlines()
        assert rows[0] == "iterate,s,Q_a_L,Q_a_R"
        rep = json.loads((tmp_path / "appendix_e_report.json").read_text())
        assert (tmp_path / "appendix_e_iterates.json").exists()
        assert rep["seed"] == 0 and rep["command"] == "reproduce-appendix"

    def test_zero_config_single_row_trace(self, tmp_path):
        assert main(["value-iterate", "--config", str(CONFIGS / "zero.toml"),
                     "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        # header, Q^(0) and the single step that already sits at the fixed point
        assert len(lines) == 3
        assert float(lines[2].split(",")[1]) == 0.0

    def test_walk_trace(self, tmp_path):
        assert main(["value-iterate", "--config", str(CONFIGS / "appendix_e.toml"),
                     "--out-dir", str(tmp_path)]) == 0
        rows = [l.split(",") for l in (tmp_path / "trace.csv").read_text().splitlines()[1:]]
        assert [float(r[2]) for r in rows] == pytest.approx([0.0, 0.25, 0.475], abs=1e-12)
        side = json.loads((tmp_path / "trace.json").read_text())
        assert side["config_sha256"] == load_config(CONFIGS / "appendix_e.toml").digest

    def test_verify_theorem_zero(self, tmp_path):
        assert main(["verify-theorem", "--config", str(CONFIGS / "zero.toml"),
                     "--out-dir", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "theorem_report.json").read_text())
        assert rep["status"] == "pass"

    def test_injected_error_exit_1(self, tmp_path):
        p = write(tmp_path, '[spec]\nproblem = "appendix_e"\n[stack]\nepsilon = 0.1\n'
                            "injected_error = 0.05\n")
        assert main(["verify-theorem", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 1

    def test_infeasible_exit_0(self, tmp_path):
        p = write(tmp_path, '[spec]\nproblem = "appendix_e"\n[stack]\nepsilon = 0.001\n'
                            "oracle_blocks = true\n")
        assert main(["verify-theorem", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "theorem_report.json").read_text())
        assert rep["status"] == "infeasible-as-configured"

    def test_audit_failure_exit_1(self, tmp_path):
        p = write(tmp_path, '[spec]\nproblem = "appendix_e"\nconstants = { lip_r = 0.5 }\n')
        assert main(["audit-spec", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 1

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BELLMAN_RESNET_OUT_DIR", str(tmp_path / "env"))
        assert main(["reproduce-appendix"]) == 0
        assert (tmp_path / "env" / "appendix_e_report.json").exists()

    def test_flag_beats_config_out_dir(self, tmp_path):
        p = write(tmp_path, f'out_dir = "{tmp_path / "cfg"}"\n[spec]\nproblem = "zero"\n')
        assert main(["audit-spec", "--config", str(p), "--out-dir", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "audit.json").exists() and not (tmp_path / "cfg").exists()

    def test_seed_override_recorded(self, tmp_path):
        assert main(["audit-spec", "--config", str(CONFIGS / "zero.toml"), "--seed", "7",
                     "--out-dir", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "audit.json").read_text())["seed"] == 7

    def test_train_operator_small(self, tmp_path):
        p = write(tmp_path, '[spec]\nproblem = "appendix_e"\n[training]\nepochs = 3\n'
                            "train_count = 64\nhard_examples = 8\ntest_count = 8\nhidden = [16]\n")
        out = tmp_path / "o"
        main(["train-operator", "--config", str(p), "--out-dir", str(out)])
        m = json.loads((out / "metrics.json").read_text())
        assert m["grad_check"] <= 1e-5 and (out / "block.json").exists()

    def test_byte_identical_reruns(self, tmp_path):
        for d in ("a", "b"):
            assert main(["value-iterate", "--config", str(CONFIGS / "appendix_e.toml"),
                         "--out-dir", str(tmp_path / d)]) == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "bellman_resnet", "reproduce-appendix",
                            "--out-dir", str(tmp_path)], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        assert "reproduce-appendix" in r.stdout


def test_closed_forms_shape():
    import numpy as np

    forms = appendix_closed_forms(np.linspace(0, 1, 11))
    assert len(forms) == 3
