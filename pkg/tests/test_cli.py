import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from reachrl import cli
from reachrl.autodiff import NumericalError
from reachrl.cli import git_blob_sha1, main, read_analyze_csv
from reachrl.config import load_config
from reachrl.train import Trainer, read_metrics

TINY = """\
env.name = gridworld
env.grid_n = 5
env.horizon = 25
agent.hidden = 16,16
agent.embed_dim = 8
train.learn_steps_per_episode = 2
train.total_env_steps = 5000
train.checkpoint_interval_episodes = 40
eval.interval_episodes = 20
eval.episodes = 5
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.txt"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run"), "--seed", "1"]) == 0
    return root, cfg


def test_smoke_train_outputs(tiny):
    root, _ = tiny
    run = root / "run"
    for name in ("metrics.csv", "config.txt", "final.bin", "final.json", "checkpoint.bin", "timing.csv",
                 "learning_curve.png", "manifest.json"):
        assert (run / name).exists(), name
    rows = read_metrics(run / "metrics.csv")
    assert len(rows) >= 5
    assert all(b["env_steps"] > a["env_steps"] for a, b in zip(rows, rows[1:]))
    assert (run / "metrics.csv").read_text().startswith("# schema: reachrl.metrics/v1")
    assert load_config(run / "config.txt").train.seed == 1


def test_relabel_fraction_near_configured(tiny):
    rows = read_metrics(tiny[0] / "run" / "metrics.csv")
    assert abs(np.mean([r["relabel_fraction"] for r in rows]) - 0.5) <= 0.02


def test_manifest_digests_match_git_blob_hash(tiny):
    run = tiny[0] / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["outputs"]["metrics.csv"] == git_blob_sha1(run / "metrics.csv")
    assert list(manifest["inputs"].values()) == [git_blob_sha1(tiny[1])]
    git = shutil.which("git")
    if git:
        ref = subprocess.run([git, "hash-object", str(run / "metrics.csv")], capture_output=True, text=True)
        assert ref.stdout.strip() == git_blob_sha1(run / "metrics.csv")


def test_same_seed_reproduces_metrics(tiny, tmp_path):
    root, cfg = tiny
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "1"]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (root / "run" / "metrics.csv").read_bytes()


def test_resume_continues_identically(tiny, tmp_path):
    root, cfg = tiny
    half = tmp_path / "half.txt"
    half.write_text(TINY.replace("total_env_steps = 5000", "total_env_steps = 2500"))
    out = tmp_path / "resumed"
    assert main(["train", "--config", str(half), "--out", str(out), "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "1", "--resume",
                 "--checkpoint", str(out / "final")]) == 0
    assert (out / "metrics.csv").read_bytes() == (root / "run" / "metrics.csv").read_bytes()


def test_several_seeds_write_separate_runs(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY.replace("total_env_steps = 5000", "total_env_steps = 100"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "multi"), "--seed", "3", "--seed", "4"]) == 0
    for s in (3, 4):
        assert load_config(tmp_path / "multi" / f"seed_{s}" / "config.txt").train.seed == s
    assert (tmp_path / "multi" / "learning_curve.png").exists()


def test_eval_report(tiny, capsys):
    run = tiny[0] / "run"
    assert main(["eval", "--checkpoint", str(run / "final"), "-K", "1"]) == 0
    report = json.loads((run / "eval.json").read_text())
    assert len(report["distances"]) == 1 and report["median"] == report["distances"][0]
    assert main(["eval", "--checkpoint", str(run / "final.bin"), "-K", "9"]) == 0
    report = json.loads((run / "eval.json").read_text())
    assert report["median"] == float(np.median(report["distances"]))
    assert report["mean"] == pytest.approx(np.mean(report["distances"]))
    assert "median_final_L1" in capsys.readouterr().out


def test_eval_oracle_policy_reaches_goals(tiny, tmp_path):
    assert main(["eval", "--checkpoint", str(tiny[0] / "run" / "final"), "-K", "20", "--oracle-policy",
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "eval_oracle.json").read_text())
    assert report["median"] == 0.0
    assert (tmp_path / "manifest.json").exists()


def test_analyze_rows(tiny, tmp_path):
    assert main(["analyze", "--checkpoint", str(tiny[0] / "run" / "final"), "--out", str(tmp_path),
                 "--attempts", "3"]) == 0
    rows = read_analyze_csv(tmp_path / "analyze.csv")
    assert len(rows) == 25
    assert [r["t"] for r in rows] == list(range(25))
    assert all(0 < r["q_value"] <= 1 for r in rows)
    assert np.allclose([r["embed_distance"] for r in rows],
                       [np.log(r["q_value"]) / np.log(0.95) for r in rows], rtol=1e-9, atol=1e-9)
    assert (tmp_path / "analyze.png").stat().st_size > 0


def test_export_embedding_matches_encoder(tiny, tmp_path):
    run = tiny[0] / "run"
    assert main(["export-embedding", "--checkpoint", str(run / "final"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "embedding.csv").read_text().splitlines()
    assert lines[0] == "# schema: reachrl.embedding/v1"
    rows = list(csv.reader(lines[1:]))
    header, body = rows[0], rows[1:]
    assert len(header) == 2 + 2 + 8 and len(body) == 25
    trainer = Trainer(load_config(run / "config.txt"))
    trainer.load_checkpoint(run / "final", full=False)
    from reachrl.envs import discretize
    graph = discretize(trainer.env.config)
    z = trainer.learner.q.embed(graph.observations).value
    exported = np.array([[float(x) for x in r[4:]] for r in body])
    assert np.array_equal(exported, z)


def test_export_rejects_unstructured(tmp_path, capsys):
    cfg = tmp_path / "u.txt"
    cfg.write_text(TINY.replace("total_env_steps = 5000", "total_env_steps = 50") + "agent.arch = unstructured\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "u")]) == 0
    assert main(["export-embedding", "--checkpoint", str(tmp_path / "u" / "final")]) == 2
    assert "structured" in capsys.readouterr().err


@pytest.mark.parametrize("gamma", ["0.9", "0.5"])
def test_oracle_check_grid(tmp_path, gamma, capsys):
    cfg = tmp_path / "g.txt"
    cfg.write_text("env.name = gridworld\nenv.grid_n = 5\n")
    assert main(["oracle-check", "--config", str(cfg), "--gamma", gamma, "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "oracle_check.json").read_text())
    assert report["ok"] and report["max_abs_error"] <= 1e-9 and report["nodes"] == 25
    assert "OK" in capsys.readouterr().out


def test_oracle_check_wall(tmp_path):
    cfg = tmp_path / "w.txt"
    cfg.write_text("env.name = wall_point_mass\n")
    assert main(["oracle-check", "--config", str(cfg), "--gamma", "0.9"]) == 0


def test_oracle_violation_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "ORACLE_TOL", -1.0)
    assert main(["oracle-check", "--gamma", "0.9"]) == 4


def test_invalid_config_names_key(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("agent.gamma = 1.5\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "agent.gamma" in capsys.readouterr().err


def test_missing_checkpoint_and_arguments(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope")]) == 2
    assert main(["eval"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "-K", "0"]) == 2


def test_checkpoint_shape_mismatch(tiny, tmp_path, capsys):
    cfg = tmp_path / "wide.txt"
    cfg.write_text(TINY.replace("agent.hidden = 16,16", "agent.hidden = 32,16"))
    assert main(["eval", "--checkpoint", str(tiny[0] / "run" / "final"), "--config", str(cfg)]) == 2
    assert "shape" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(self, callback=None):
        raise NumericalError("q_update: non-finite loss")

    monkeypatch.setattr(Trainer, "run", boom)
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "n")]) == 3
