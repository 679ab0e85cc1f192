"""Shared fixtures, including the cached reference run used by the
acceptance suite: desk-preset model, synthetic corpus of 9100 dialogues,
10 pretraining epochs on >=1MB of text, 30 fine-tuning epochs, plus the
paired from-scratch fine-tune. Built once through the CLI and cached under
tests/artifacts/.
"""
from __future__ import annotations

import json
import shutil
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ARTIFACTS = Path(__file__).parent / "artifacts"
REFERENCE_DIR = ARTIFACTS / "reference"

REFERENCE_SEED = 41

REFERENCE_CONFIG = {
    "model": {},  # desk defaults: 2 blocks, 2 heads, d_model 64, d_ff 256, window 128
    "corpus": {
        "n_dialogues": 9100,
        "persona_density": 0.162,
        "seed": REFERENCE_SEED,
        "pretrain_min_chars": 1_100_000,
    },
    "train": {
        "epochs_pretrain": 10,
        "epochs_finetune": 30,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "warmup_steps": 100,
        "grad_clip": 1.0,
        "seed": REFERENCE_SEED,
    },
    "decode": {"max_tokens": 64, "seed": REFERENCE_SEED},
}
FINETUNE_LR = 5e-4


def _configs(ref_dir: Path) -> tuple[Path, Path]:
    pre = json.loads(json.dumps(REFERENCE_CONFIG))
    ft = json.loads(json.dumps(REFERENCE_CONFIG))
    ft["train"]["learning_rate"] = FINETUNE_LR
    pre_path = ref_dir / "config_pretrain.json"
    ft_path = ref_dir / "config_finetune.json"
    pre_path.write_text(json.dumps(pre, indent=2))
    ft_path.write_text(json.dumps(ft, indent=2))
    return pre_path, ft_path


def _fingerprint() -> str:
    return json.dumps({"cfg": REFERENCE_CONFIG, "ft_lr": FINETUNE_LR}, sort_keys=True)


def build_reference(ref_dir: Path) -> None:
    from personaroute.cli import main

    ref_dir.mkdir(parents=True, exist_ok=True)
    pre_cfg, ft_cfg = _configs(ref_dir)
    timings = {}

    def run(label, argv):
        t0 = time.time()
        print(f"\n[reference build] {label} ...", file=sys.stderr, flush=True)
        rc = main(argv)
        assert rc == 0, f"reference build step {label} failed with exit code {rc}"
        timings[label] = time.time() - t0
        print(f"[reference build] {label} done in {timings[label]:.0f}s", file=sys.stderr, flush=True)

    run("datagen", ["datagen", "--config", str(pre_cfg), "--out", str(ref_dir)])
    run("pretrain", ["pretrain", "--config", str(pre_cfg), "--out", str(ref_dir)])
    run("finetune", [
        "finetune", "--config", str(ft_cfg), "--out", str(ref_dir),
        "--init-from", str(ref_dir / "lm.ckpt"),
    ])

    scratch = ref_dir / "scratch"
    scratch.mkdir(exist_ok=True)
    for name in ("train.jsonl", "valid.jsonl", "vocab.txt"):
        shutil.copyfile(ref_dir / name, scratch / name)
    run("finetune_scratch", ["finetune", "--config", str(ft_cfg), "--out", str(scratch)])

    (ref_dir / "timings.json").write_text(json.dumps(timings, indent=2))
    (ref_dir / "fingerprint.json").write_text(_fingerprint())


@pytest.fixture(scope="session")
def reference_run() -> Path:
    """Paths of the cached reference run, building it if needed (slow once)."""
    marker = REFERENCE_DIR / "fingerprint.json"
    if not marker.exists() or marker.read_text() != _fingerprint():
        if REFERENCE_DIR.exists():
            shutil.rmtree(REFERENCE_DIR)
        build_reference(REFERENCE_DIR)
    return REFERENCE_DIR


@pytest.fixture(scope="session")
def reference_model(reference_run):
    from personaroute.model import load_checkpoint

    return load_checkpoint(reference_run / "dialogue.ckpt")


@pytest.fixture(scope="session")
def reference_splits(reference_run):
    from personaroute.data import load_jsonl

    return {
        name: load_jsonl(reference_run / f"{name}.jsonl")
        for name in ("train", "valid", "test_random", "test_biased")
    }
