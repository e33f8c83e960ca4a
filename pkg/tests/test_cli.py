import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from aei.cli import main
from aei.config import RunConfig, dump_config, load_config, parse_config
from aei.errors import ConfigError

SMOKE_OVERRIDES = [
    "iterations=2", "n_envs=2", "episode_steps=10", "n_joints=2",
    "ppo.minibatch_envs=2", "ppo.chunk_steps=5", "id.minibatch_envs=2",
    "net.encoder=16", "net.hidden=24", "net.head=16", "eval_episodes=4",
]


@pytest.fixture()
def smoke_cfg(tmp_path):
    path = tmp_path / "smoke.cfg"
    assert main(["export-defaults", str(path)]) == 0
    return path


def run_cli(args):
    """Invoke the CLI through a subprocess so exit codes and stderr are real."""
    proc = subprocess.run(
        [sys.executable, "-m", "aei", *args],
        capture_output=True,
        text=True,
        env={**os.environ, "PYTHONPATH": str(Path(__file__).parent.parent / "src")},
    )
    return proc


class TestConfigFormat:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(dump_config(cfg)) == cfg

    def test_exported_defaults_reparse(self, smoke_cfg):
        assert load_config(smoke_cfg) == RunConfig()

    def test_defaults_contain_rotor_inertia_range(self, smoke_cfg):
        text = smoke_cfg.read_text()
        assert "ranges.rotor_inertia = 0.0, 0.015" in text

    def test_file_is_line_oriented_key_value(self, smoke_cfg):
        for line in smoke_cfg.read_text().splitlines():
            stripped = line.split("#", 1)[0].strip()
            if stripped:
                assert "=" in stripped

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError, match="n_evns"):
            parse_config("n_evns = 2")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("n_envs = soon")

    def test_comments_and_blanks_skipped(self):
        cfg = parse_config("# hello\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_override_validation(self, smoke_cfg):
        with pytest.raises(ConfigError):
            load_config(smoke_cfg, ["n_envs=0"])


class TestTrainCommand:
    def test_smoke_creates_artifacts(self, smoke_cfg, tmp_path):
        out = tmp_path / "run"
        code = main(["train", str(smoke_cfg), *SMOKE_OVERRIDES, "--out", str(out)])
        assert code == 0
        assert (out / "train.csv").exists()
        assert (out / "config.cfg").exists()
        assert (out / "manifest.txt").exists()
        assert (out / "checkpoints" / "ckpt_final.bin").exists()
        lines = (out / "train.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        # snapshot reproduces the resolved run configuration exactly
        snap = load_config(out / "config.cfg")
        assert snap == load_config(smoke_cfg, SMOKE_OVERRIDES)

    def test_unknown_override_key_exits_nonzero(self, smoke_cfg):
        proc = run_cli(["train", str(smoke_cfg), "n_evns=2"])
        assert proc.returncode != 0
        assert "error[config]" in proc.stderr
        assert "n_evns" in proc.stderr

    def test_run_dir_never_overwritten(self, smoke_cfg, tmp_path):
        out = tmp_path / "runx"
        out.mkdir()
        (out / "sentinel.txt").write_text("keep me")
        code = main(["train", str(smoke_cfg), *SMOKE_OVERRIDES, "--out", str(out)])
        assert code == 0
        assert (out / "sentinel.txt").read_text() == "keep me"
        suffixed = [p for p in tmp_path.iterdir() if p.name.startswith("runx-")]
        assert len(suffixed) == 1

    def test_missing_config_file(self):
        proc = run_cli(["train", "no-such-file.cfg"])
        assert proc.returncode != 0
        assert "error[config]" in proc.stderr


class TestEvalCommand:
    @pytest.fixture()
    def trained(self, smoke_cfg, tmp_path):
        out = tmp_path / "trained"
        assert main(["train", str(smoke_cfg), *SMOKE_OVERRIDES, "--out", str(out)]) == 0
        return out / "checkpoints" / "ckpt_final.bin"

    def test_eval_fresh_checkpoint_bounded_mae(self, smoke_cfg, trained, tmp_path):
        # a barely-trained net behaves like a constant predictor: normalized
        # MAE sits near the 0.25-0.5 band, never near the worst case 1.0
        report_path = tmp_path / "report.csv"
        code = main(["eval", str(trained), str(smoke_cfg), "16",
                     *SMOKE_OVERRIDES, "--out", str(report_path)])
        assert code == 0
        rows = report_path.read_text().strip().splitlines()[1:]
        maes = [float(row.split(",")[4]) for row in rows]
        assert all(0.0 <= m <= 0.65 for m in maes)
        assert np.mean(maes) <= 0.55

    def test_zero_episodes_usage_error(self, smoke_cfg, trained):
        proc = run_cli(["eval", str(trained), str(smoke_cfg), "0", *SMOKE_OVERRIDES])
        assert proc.returncode != 0
        assert "error[usage]" in proc.stderr

    def test_truncated_checkpoint_format_error(self, smoke_cfg, trained, tmp_path):
        broken = tmp_path / "broken.bin"
        raw = Path(trained).read_bytes()
        broken.write_bytes(raw[: len(raw) // 2])
        proc = run_cli(["eval", str(broken), str(smoke_cfg), "4", *SMOKE_OVERRIDES])
        assert proc.returncode != 0
        assert "error[format]" in proc.stderr

    def test_incompatible_joint_count(self, smoke_cfg, trained):
        args = [a for a in SMOKE_OVERRIDES if not a.startswith("n_joints")]
        proc = run_cli(["eval", str(trained), str(smoke_cfg), "4",
                        *args, "n_joints=3"])
        assert proc.returncode != 0
        assert "n_joints" in proc.stderr

    def test_incompatible_width_names_tensor(self, smoke_cfg, trained):
        args = [a for a in SMOKE_OVERRIDES if not a.startswith("net.hidden")]
        proc = run_cli(["eval", str(trained), str(smoke_cfg), "4",
                        *args, "net.hidden=32"])
        # widths come from the checkpoint itself; config mismatch is fine
        assert proc.returncode == 0

    def test_save_load_eval_reproduces_report_bitwise(self, smoke_cfg, trained, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for target in (a, b):
            code = main(["eval", str(trained), str(smoke_cfg), "5",
                         *SMOKE_OVERRIDES, "--out", str(target)])
            assert code == 0
        assert a.read_bytes() == b.read_bytes()


class TestBaselineCommand:
    def test_zero_baseline_produces_report(self, smoke_cfg, tmp_path):
        out = tmp_path / "base"
        code = main(["baseline", "zero", str(smoke_cfg), "6",
                     *SMOKE_OVERRIDES, "--out", str(out)])
        assert code == 0
        report = (out / "eval_report.csv").read_text()
        header = report.splitlines()[0]
        assert header == "field,group,mae_physical,unit,mae_normalized,range_lo,range_hi,ci_lo,ci_hi"

    def test_report_format_matches_eval(self, smoke_cfg, tmp_path):
        out = tmp_path / "base2"
        assert main(["baseline", "sine-sweep", str(smoke_cfg), "4",
                     *SMOKE_OVERRIDES, "--out", str(out)]) == 0
        ckpt = out / "checkpoints" / "ckpt_final.bin"
        report2 = tmp_path / "again.csv"
        assert main(["eval", str(ckpt), str(smoke_cfg), "4",
                     *SMOKE_OVERRIDES, "--out", str(report2)]) == 0
        base_rows = (out / "eval_report.csv").read_text().splitlines()
        eval_rows = report2.read_text().splitlines()
        assert base_rows[0] == eval_rows[0]
        assert len(base_rows) == len(eval_rows)

    def test_unknown_kind(self, smoke_cfg):
        proc = run_cli(["baseline", "wobble", str(smoke_cfg), "4"])
        assert proc.returncode != 0
        assert "error[usage]" in proc.stderr


class TestDeterminismContract:
    def test_same_seed_same_train_csv_modulo_wall_clock(self, smoke_cfg, tmp_path):
        csvs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert main(["train", str(smoke_cfg), *SMOKE_OVERRIDES,
                         "--out", str(out)]) == 0
            csvs.append((out / "train.csv").read_text())

        def strip_wall(text):
            lines = text.strip().splitlines()
            return [",".join(line.split(",")[:-1]) for line in lines]

        assert strip_wall(csvs[0]) == strip_wall(csvs[1])

    def test_workers_env_fallback(self, smoke_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("AEI_WORKERS", "3")
        out = tmp_path / "w"
        assert main(["train", str(smoke_cfg), *SMOKE_OVERRIDES, "--out", str(out)]) == 0
        assert "workers = 3" in (out / "config.cfg").read_text()

    def test_workers_env_invalid(self, smoke_cfg, monkeypatch):
        monkeypatch.setenv("AEI_WORKERS", "many")
        assert main(["train", str(smoke_cfg), *SMOKE_OVERRIDES]) == 2
