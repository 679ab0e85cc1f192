import json
import subprocess
import sys
from pathlib import Path

import pytest

from personaroute.cli import main

TINY_CONFIG = {
    "model": {"n_blocks": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "context_window": 96},
    "corpus": {
        "n_dialogues": 120, "persona_density": 0.3, "seed": 5,
        "n_valid": 20, "n_test_random": 20, "n_test_biased": 10,
        "pretrain_min_chars": 4000,
    },
    "train": {
        "epochs_pretrain": 1, "epochs_finetune": 1, "batch_size": 16,
        "learning_rate": 1e-3, "warmup_steps": 5, "seed": 5,
    },
    "decode": {"max_tokens": 12, "seed": 5},
}


def write_config(tmp_path, **overrides) -> Path:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    for section, vals in overrides.items():
        cfg.setdefault(section, {}).update(vals)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_datagen_writes_artifacts_and_summary(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "persona-revealing fraction" in out
    for name in ("train.jsonl", "valid.jsonl", "test_random.jsonl", "test_biased.jsonl",
                 "vocab.txt", "pretrain.txt"):
        assert (tmp_path / "run" / name).exists(), name


def test_datagen_deterministic_reruns(tmp_path):
    cfg = write_config(tmp_path)
    for sub in ("a", "b"):
        assert main(["datagen", "--config", str(cfg), "--out", str(tmp_path / sub)]) == 0
    for name in ("train.jsonl", "test_biased.jsonl", "vocab.txt", "pretrain.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_datagen_zero_density_fails_biased_split(tmp_path, capsys):
    cfg = write_config(tmp_path, corpus={"persona_density": 0.0})
    rc = main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert rc == 1
    assert "biased" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"model": {"n_layers": 3}}))
    rc = main(["datagen", "--config", str(path), "--out", str(tmp_path / "run")])
    assert rc == 1
    assert "n_layers" in capsys.readouterr().err


def test_unknown_config_section_rejected(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"models": {}}))
    rc = main(["datagen", "--config", str(path), "--out", str(tmp_path / "run")])
    assert rc == 1
    assert "models" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """datagen -> pretrain -> finetune once, shared by the flow tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg = write_config(root)
    run = root / "run"
    assert main(["datagen", "--config", str(cfg), "--out", str(run)]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(run)]) == 0
    assert main([
        "finetune", "--config", str(cfg), "--out", str(run),
        "--init-from", str(run / "lm.ckpt"),
    ]) == 0
    return cfg, run


def test_pretrain_and_finetune_artifacts(pipeline):
    _, run = pipeline
    assert (run / "lm.ckpt").exists()
    assert (run / "dialogue.ckpt").exists()
    records = [
        json.loads(line)
        for line in (run / "finetune_report.jsonl").read_text().splitlines()
    ]
    assert len(records) == 1
    assert set(records[0]) == {
        "epoch", "loss_total", "loss_d", "loss_lm", "loss_w", "val_ppl", "predictor_acc",
    }


def test_finetune_without_init_warns(pipeline, tmp_path, capsys):
    cfg, run = pipeline
    out = tmp_path / "scratch"
    out.mkdir()
    for name in ("train.jsonl", "valid.jsonl", "vocab.txt"):
        (out / name).write_bytes((run / name).read_bytes())
    rc = main(["finetune", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    assert "training from scratch" in capsys.readouterr().err


def test_generate_prints_alpha_tags(pipeline, capsys):
    cfg, run = pipeline
    base = [
        "generate", "--config", str(cfg), "--out", str(run),
        "--init-from", str(run / "dialogue.ckpt"),
        "--context", "where do you live ?",
        "--persona", '{"gender": "female", "location": "ashvale", "tags": ["chess"]}',
    ]
    assert main(base) == 0
    assert "(predicted)" in capsys.readouterr().out
    assert main(base + ["--alpha", "1.0"]) == 0
    assert "alpha=1.0000 (fixed)" in capsys.readouterr().out


def test_generate_rejects_out_of_range_alpha(pipeline, capsys):
    cfg, run = pipeline
    rc = main([
        "generate", "--config", str(cfg), "--out", str(run),
        "--init-from", str(run / "dialogue.ckpt"),
        "--context", "hi", "--alpha", "1.5",
    ])
    assert rc == 1
    assert "outside [0, 1]" in capsys.readouterr().err


def test_eval_single_and_grid(pipeline, capsys):
    cfg, run = pipeline
    rc = main([
        "eval", "--config", str(cfg), "--out", str(run),
        "--init-from", str(run / "dialogue.ckpt"), "--split", "biased",
        "--alpha-grid", "0,1",
    ])
    assert rc == 0
    assert (run / "eval_biased_alpha0.json").exists()
    assert (run / "eval_biased_alpha1.json").exists()
    sweep = json.loads((run / "sweep_biased.json").read_text())
    assert [row["alpha"] for row in sweep] == [0.0, 1.0]


def test_eval_missing_split_exits_one(pipeline, tmp_path, capsys):
    cfg, run = pipeline
    rc = main([
        "eval", "--config", str(cfg), "--out", str(tmp_path / "nowhere"),
        "--init-from", str(run / "dialogue.ckpt"), "--split", "random",
    ])
    assert rc == 1
    assert "test_random.jsonl" in capsys.readouterr().err


def test_serve_refuses_missing_checkpoint(tmp_path, capsys):
    rc = main(["serve", "--out", str(tmp_path), "--init-from", str(tmp_path / "none.ckpt")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "checkpoint" in err


def test_console_script_smoke():
    proc = subprocess.run(
        [sys.executable, "-m", "personaroute.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "personaroute" in proc.stdout
