import json
import os
import subprocess
import sys

import numpy as np
import pytest

CLI = [sys.executable, "-m", "adaptplanner.cli"]


def run_cli(args, tmp_path, **kwargs):
    env = dict(os.environ, ADAPTPLANNER_DATA_DIR=str(tmp_path / "artifacts"))
    return subprocess.run(CLI + args, capture_output=True, text=True, env=env, **kwargs)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny gen-data -> train pipeline shared by the CLI tests."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tmp / "cfg.yaml"
    cfg.write_text(
        "\n".join(
            [
                "diffusion:",
                "  n_steps: 8",
                "  horizon: 24",
                "denoiser:",
                "  width: 8",
                "  blocks: 2",
                "  kernel_size: 3",
                "  embed_dim: 8",
                "  groups: 4",
                "  dilations: [1, 4]",
                "training:",
                "  steps: 30",
                "  batch_size: 4",
                "eval:",
                "  n_tasks: 2",
                "",
            ]
        )
    )
    r = run_cli(["gen-data", "--maze", "umaze", "--n", "12", "--seed", "3",
                 "--out", str(tmp / "e.pool")], tmp)
    assert r.returncode == 0, r.stderr
    r = run_cli(["train", "--pool", str(tmp / "e.pool"), "--config", str(cfg),
                 "--seed", "4", "--out", str(tmp / "base.ckpt")], tmp)
    assert r.returncode == 0, r.stderr
    return tmp, cfg


class TestExitCodes:
    def test_unknown_flag_exits_2(self, tmp_path):
        r = run_cli(["plan", "--bogus"], tmp_path)
        assert r.returncode == 2

    def test_unknown_command_exits_2(self, tmp_path):
        r = run_cli(["frobnicate"], tmp_path)
        assert r.returncode == 2

    def test_missing_file_exits_1_with_json_error(self, tmp_path):
        r = run_cli(["eval", "--ckpt", str(tmp_path / "nope.ckpt")], tmp_path)
        assert r.returncode == 1
        err = json.loads(r.stderr.strip().splitlines()[-1])
        assert err["error"] == "IoError"

    def test_bad_point_exits_1(self, workspace, tmp_path):
        tmp, _ = workspace
        r = run_cli(["plan", "--ckpt", str(tmp / "base.ckpt"), "--start", "oops",
                     "--goal", "1.5,1.5"], tmp_path)
        assert r.returncode == 1
        err = json.loads(r.stderr.strip().splitlines()[-1])
        assert err["error"] == "InvalidConfig"


class TestPlanRender:
    def test_plan_then_render_identical_svg(self, workspace):
        tmp, _ = workspace
        r = run_cli(["plan", "--ckpt", str(tmp / "base.ckpt"), "--start", "1.5,1.5",
                     "--goal", "3.5,3.5", "--seed", "7", "--out", str(tmp / "plan")], tmp)
        assert r.returncode == 0, r.stderr
        out = json.loads(r.stdout)
        r2 = run_cli(["render", "--traj", out["trajectory"], "--out", str(tmp / "re.svg")], tmp)
        assert r2.returncode == 0, r2.stderr
        assert (tmp / "plan.svg").read_bytes() == (tmp / "re.svg").read_bytes()

    def test_plan_start_equals_goal(self, workspace):
        tmp, _ = workspace
        r = run_cli(["plan", "--ckpt", str(tmp / "base.ckpt"), "--start", "1.5,1.5",
                     "--goal", "1.5,1.5", "--out", str(tmp / "deg")], tmp)
        assert r.returncode == 0, r.stderr
        doc = json.loads((tmp / "deg.json").read_text())
        values = np.array(doc["values"])
        assert np.allclose(values[0, :2], [1.5, 1.5], atol=1e-9)
        assert np.allclose(values[-1, :2], [1.5, 1.5], atol=1e-9)

    def test_plan_in_wall_rejected(self, workspace, tmp_path):
        tmp, _ = workspace
        r = run_cli(["plan", "--ckpt", str(tmp / "base.ckpt"), "--start", "0.5,0.5",
                     "--goal", "1.5,1.5"], tmp_path)
        assert r.returncode == 1
        assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "InvalidTask"


class TestEval:
    def test_eval_writes_reports(self, workspace):
        tmp, cfg = workspace
        out_dir = tmp / "evalout"
        r = run_cli(["eval", "--ckpt", str(tmp / "base.ckpt"), "--config", str(cfg),
                     "--suite", "random", "--seed", "5", "--out-dir", str(out_dir)], tmp)
        assert r.returncode == 0, r.stderr
        assert (out_dir / "random_episodes.csv").exists()
        assert (out_dir / "random_summary.json").exists()
        assert (out_dir / "random_scores.png").exists()
        summary = json.loads(r.stdout)
        assert summary["episodes"] == 6  # 2 tasks x 3 seeds

    def test_eval_reproducible(self, workspace):
        tmp, cfg = workspace
        args = ["eval", "--ckpt", str(tmp / "base.ckpt"), "--config", str(cfg),
                "--suite", "random", "--seed", "5"]
        a = run_cli(args + ["--out-dir", str(tmp / "ev1")], tmp)
        b = run_cli(args + ["--out-dir", str(tmp / "ev2")], tmp)
        assert a.returncode == 0 and b.returncode == 0
        assert (tmp / "ev1" / "random_episodes.csv").read_bytes() == (
            tmp / "ev2" / "random_episodes.csv"
        ).read_bytes()
        assert (tmp / "ev1" / "random_summary.json").read_bytes() == (
            tmp / "ev2" / "random_summary.json"
        ).read_bytes()


class TestConfigPrecedence:
    def test_flag_overrides_config(self, workspace, tmp_path):
        tmp, cfg = workspace
        r = run_cli(["train", "--pool", str(tmp / "e.pool"), "--config", str(cfg),
                     "--steps", "2", "--seed", "4", "--out", str(tmp_path / "s.ckpt")], tmp_path)
        assert r.returncode == 0, r.stderr
        assert json.loads(r.stdout)["steps"] == 2

    def test_bad_config_key_rejected(self, workspace, tmp_path):
        tmp, _ = workspace
        bad = tmp_path / "bad.yaml"
        bad.write_text("training:\n  warp_factor: 9\n")
        r = run_cli(["train", "--pool", str(tmp / "e.pool"), "--config", str(bad),
                     "--out", str(tmp_path / "x.ckpt")], tmp_path)
        assert r.returncode == 1
        assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "InvalidConfig"
