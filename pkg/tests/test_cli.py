import json

import pytest
import yaml

from spatial_distill.cli import main

SMALL = {
    "dataset": {"n_scenes": 6},
    "model": {"n_layers": 1, "hidden_size": 32, "n_heads": 2, "mlp_dim": 64, "K": 4},
    "train": {"epochs": 1, "learning_rate": 1e-3},
    "eval": {"latency_runs": 20, "max_new_tokens": 8},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    assert main(["generate", "--config", str(cfg), "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_generate_is_idempotent(run, tmp_path):
    assert main(["generate", "--config", str(run / "small.yaml"), "--seed", "3", "--out", str(tmp_path)]) == 0
    files = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(run / "data") for p in (run / "data").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / rel).read_bytes() == (run / "data" / rel).read_bytes(), rel
    assert (tmp_path / "config.input.yaml").read_text() == (run / "small.yaml").read_text()


def test_train_writes_run_directory(run):
    for name in ("config.yaml", "loss_log.jsonl", "run_record.json", "checkpoints/best.pt", "checkpoints/last.pt"):
        assert (run / "run" / name).exists(), name


def test_eval_is_idempotent(run, tmp_path, capsys):
    ckpt = str(run / "run" / "checkpoints" / "best.pt")
    args = ["eval", "--checkpoint", ckpt, "--data", str(run / "data")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "qualitative.jsonl").read_bytes() == (tmp_path / "b" / "qualitative.jsonl").read_bytes()
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert timing["mean_latency_ms"] > 0


def test_eval_on_oracle_answers(run, tmp_path):
    ckpt = str(run / "run" / "checkpoints" / "best.pt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(run / "data"), "--oracle", "--out", str(tmp_path)]) == 0
    spatial = json.loads((tmp_path / "metrics.json").read_text())["spatial"]
    assert spatial["overall"] == 1.0


def test_diagnose_answer_unchanged_by_flag(run, capsys):
    base = ["diagnose", "--checkpoint", str(run / "run" / "checkpoints" / "best.pt"), "--data", str(run / "data")]
    for sample in (0, 3):
        assert main(base + ["--sample", str(sample)]) == 0
        plain = capsys.readouterr().out
        assert main(base + ["--sample", str(sample), "--diagnostic"]) == 0
        diag = capsys.readouterr().out
        assert plain.count("\n") == 1 and plain.startswith("answer: ")
        assert diag.splitlines()[0] == plain.rstrip("\n")
        assert diag.splitlines()[1].startswith("thinking: ")
        assert len(diag.splitlines()[1].split()) == 1 + SMALL["model"]["K"]


def test_incompatible_checkpoint(run, tmp_path, capsys):
    other = dict(SMALL, dataset={"n_scenes": 4, "grid": 8})
    cfg = tmp_path / "other.yaml"
    cfg.write_text(yaml.safe_dump(other))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    ckpt = str(run / "run" / "checkpoints" / "best.pt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "e")]) == 2
    err = capsys.readouterr().err
    assert "(3, 16, 16, 8)" in err and "(3, 8, 8, 8)" in err


def test_missing_data_dir(tmp_path, capsys):
    assert main(["diagnose", "--checkpoint", str(tmp_path / "x.pt"), "--data", str(tmp_path / "nope")]) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("train:\n  epoch: 3\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "epoch" in capsys.readouterr().err


def test_disable_loss_and_static_mode(run, tmp_path):
    args = ["train", "--config", str(run / "small.yaml"), "--data", str(run / "data"), "--out", str(tmp_path)]
    assert main(args + ["--disable-loss", "depth", "--disable-loss", "feature", "--loss-mode", "static", "--k", "2"]) == 0
    saved = yaml.safe_load((tmp_path / "config.yaml").read_text())
    assert saved["train"]["loss_mode"] == "static"
    assert saved["model"]["K"] == 2
    assert set(saved["train"]["enabled_losses"]) == {"text", "detection", "spatial", "multiview"}


def test_ablate_k_sweep(run, tmp_path):
    args = ["ablate", "--config", str(run / "small.yaml"), "--data", str(run / "data"), "--out", str(tmp_path)]
    assert main(args + ["--sweep", "k", "--k", "2", "--k", "4"]) == 0
    result = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["K"] for r in result["k"]] == [2, 4]
    assert all(r["best_val_loss"] == r["best_val_loss"] for r in result["k"])
    md = (tmp_path / "ablation.md").read_text()
    assert "Best Val Loss" in md and "| K=4 |" in md
    assert (tmp_path / "k" / "k_2" / "metrics.json").exists()
