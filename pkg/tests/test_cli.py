"""End-to-end command-line tests on a miniature configuration (32x32 images, narrow layers)."""

import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from txt2im.cli import main
from txt2im.config import resolve_config
from txt2im.dataset import load_png
from txt2im.gan_core import generate
from txt2im.trainer import load_generator

TINY = {
    "encoder": {
        "embed_dim": 8,
        "max_len": 40,
        "conv_channels": [8, 8],
        "pool": 2,
        "rnn_hidden": 8,
        "resolution": 32,
        "image_channels": [4, 8],
        "batch_size": 8,
        "epochs": 1,
    },
    "gan": {"z_dim": 4, "text_dim": 8, "cond_dim": 4, "resolution": 32, "base_channels": 4},
    "trainer": {"batch_size": 8, "epochs": 2, "checkpoint_every": 1, "snapshot_every": 1},
    "style": {"batch_size": 8, "epochs": 2, "steps_per_epoch": 3},
    "eval": {"folds": 2, "pairs_per_fold": 4, "samples_per_caption": 1},
}


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def run(*argv) -> int:
    return main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("TXT2IM_RUNS_DIR", str(root / "runs"))
        data = root / "data"
        assert run("make-data", "--classes", 4, "--per-class", 4, "--resolution", 32, "--seed", 7, "--out", data) == 0
        assert run("train-encoder", "--config", cfg, "--data", data, "--name", "enc", "--seed", 0) == 0
        for regime in ("gan", "gan-cls", "gan-int", "gan-int-cls"):
            assert (
                run(
                    "train-gan", "--config", cfg, "--data", data, "--encoder", root / "runs" / "enc" / "best",
                    "--regime", regime, "--seed", 0,
                )
                == 0
            )
            assert run("train-style", "--config", cfg, "--gan", root / "runs" / f"gan-{regime}", "--data", data,
                       "--name", f"style-{regime}", "--seed", 0) == 0
        yield root, cfg, data, mp


# -- make-data -----------------------------------------------------------------


def test_make_data_layout(workspace):
    _, _, data, _ = workspace
    assert sorted(p.name for p in data.iterdir()) == ["captions", "images", "meta", "splits"]
    assert len(list((data / "images").rglob("*.png"))) == 16
    assert len(list((data / "captions").rglob("*.txt"))) == 16
    train = (data / "splits" / "train.txt").read_text().split()
    test = (data / "splits" / "test.txt").read_text().split()
    assert set(train).isdisjoint(test) and len(train) + len(test) == 4


def test_make_data_rerun_is_byte_identical(workspace, tmp_path):
    _, _, data, _ = workspace
    again = tmp_path / "again"
    assert run("make-data", "--classes", 4, "--per-class", 4, "--resolution", 32, "--seed", 7, "--out", again) == 0
    assert tree_digest(again) == tree_digest(data)


def test_make_data_refuses_existing_dir_without_force(workspace, capsys):
    _, _, data, _ = workspace
    before = tree_digest(data)
    mtimes = {p: p.stat().st_mtime_ns for p in data.rglob("*")}
    code = run("make-data", "--classes", 4, "--per-class", 2, "--resolution", 32, "--out", data)
    assert code == 1
    assert capsys.readouterr().err.startswith("txt2im: error[validation]:")
    assert tree_digest(data) == before
    assert {p: p.stat().st_mtime_ns for p in data.rglob("*")} == mtimes


def test_make_data_force_overwrites(tmp_path):
    out = tmp_path / "d"
    out.mkdir()
    (out / "stale.txt").write_text("x")
    assert run("make-data", "--classes", 4, "--per-class", 2, "--resolution", 32, "--out", out, "--force") == 0
    assert not (out / "stale.txt").exists()
    assert len(list((out / "images").rglob("*.png"))) == 8


# -- training commands ------------------------------------------------------------


def test_train_gan_run_dir(workspace):
    root, _, _, _ = workspace
    run_dir = root / "runs" / "gan-gan-int-cls"
    assert (run_dir / "checkpoints" / "epoch_1.pt").is_file()
    assert (run_dir / "checkpoints" / "last.pt").is_file()
    assert (run_dir / "samples").is_dir()
    history = [json.loads(ln) for ln in (run_dir / "history.jsonl").read_text().splitlines()]
    assert len(history) >= 1
    assert [h["step"] for h in history] == list(range(len(history)))
    config = json.loads((run_dir / "config.json").read_text())
    assert config["trainer"]["regime"] == "gan-int-cls"
    assert config["gan"]["z_dim"] == 4


def test_config_written_matches_resolution(workspace):
    root, cfg, _, _ = workspace
    written = json.loads((root / "runs" / "enc" / "config.json").read_text())
    expected = resolve_config(config_file=cfg, overrides={"name": "enc"})
    assert written["encoder"]["embed_dim"] == expected.encoder.embed_dim == 8
    assert written["name"] == "enc"


def test_invalid_regime_is_usage_error(workspace, capsys):
    _, cfg, data, _ = workspace
    code = run("train-gan", "--config", cfg, "--data", data, "--regime", "gan-cs", "--name", "bad")
    err = capsys.readouterr().err
    assert code == 1
    assert err.startswith("txt2im: error[usage]:")
    for name in ("gan", "gan-cls", "gan-int", "gan-int-cls"):
        assert name in err


def test_pretrained_mode_requires_encoder(workspace, capsys):
    _, cfg, data, _ = workspace
    assert run("train-gan", "--config", cfg, "--data", data, "--name", "noenc") == 1
    assert "error[usage]" in capsys.readouterr().err


def test_resume_continues_history(workspace):
    root, cfg, data, _ = workspace
    src = root / "runs" / "gan-gan-cls"
    base = [json.loads(ln) for ln in (src / "history.jsonl").read_text().splitlines()]
    # a fresh two-epoch run, then resume its epoch-1 checkpoint to epoch 2
    enc = root / "runs" / "enc" / "best"
    assert run("train-gan", "--config", cfg, "--data", data, "--encoder", enc, "--regime", "gan-cls",
               "--seed", 0, "--name", "res", "--epochs", 1) == 0
    part = [json.loads(ln) for ln in (root / "runs" / "res" / "history.jsonl").read_text().splitlines()]
    assert 0 < len(part) < len(base)
    assert run("train-gan", "--config", cfg, "--data", data, "--seed", 0,
               "--resume", root / "runs" / "res" / "checkpoints" / "epoch_1.pt", "--epochs", 2) == 0
    full = [json.loads(ln) for ln in (root / "runs" / "res" / "history.jsonl").read_text().splitlines()]
    assert [h["step"] for h in full] == list(range(len(base)))
    assert full[: len(part)] == part
    assert full == base


def test_train_style_checkpoint(workspace):
    root, _, _, _ = workspace
    run_dir = root / "runs" / "style-gan-int-cls"
    assert (run_dir / "checkpoints" / "style.pt").is_file()
    hist = [json.loads(ln) for ln in (run_dir / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [0, 1]


# -- generate -------------------------------------------------------------------


def test_generate_grid_and_determinism(workspace, tmp_path):
    root, _, _, _ = workspace
    ckpt = root / "runs" / "gan-gan-int-cls"
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        assert run("generate", "--checkpoint", ckpt, "--caption", "a red circle", "--caption",
                   "a blue square", "--count", 4, "--seed", 3, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    with Image.open(a) as im:
        assert im.size == (4 * 32, 2 * 32)


def test_generate_rows_are_captions(workspace, tmp_path):
    root, _, _, _ = workspace
    ckpt = root / "runs" / "gan-gan-int-cls" / "checkpoints" / "last.pt"
    out = tmp_path / "g.png"
    assert run("generate", "--checkpoint", ckpt, "--caption", "a red circle", "--caption", "a blue square",
               "--count", 3, "--seed", 5, "--out", out) == 0
    G, enc, _ = load_generator(ckpt)
    z = torch.randn(6, 4, generator=torch.Generator().manual_seed(5))
    emb = enc.embed_text_cached(["a red circle"] * 3 + ["a blue square"] * 3)
    ref = ((generate(z, emb, G).numpy().transpose(0, 2, 3, 1) + 1) * 127.5).round().clip(0, 255)
    grid = np.asarray(Image.open(out).convert("RGB")).astype(float)
    for i in range(6):
        r, c = divmod(i, 3)
        assert np.abs(grid[r * 32 : r * 32 + 32, c * 32 : c * 32 + 32] - ref[i]).max() <= 1


def test_generate_count_zero_is_usage_error(workspace, tmp_path, capsys):
    root, _, _, _ = workspace
    code = run("generate", "--checkpoint", root / "runs" / "gan-gan", "--caption", "x", "--count", 0,
               "--out", tmp_path / "x.png")
    assert code == 1
    assert "error[usage]" in capsys.readouterr().err
    assert not (tmp_path / "x.png").exists()


def test_generate_empty_caption_file(workspace, tmp_path, capsys):
    root, _, _, _ = workspace
    empty = tmp_path / "caps.txt"
    empty.write_text("\n\n")
    code = run("generate", "--checkpoint", root / "runs" / "gan-gan", "--captions-file", empty,
               "--out", tmp_path / "x.png")
    assert code == 1
    assert "error[validation]" in capsys.readouterr().err


def test_missing_checkpoint_is_validation_error(tmp_path, capsys):
    code = run("generate", "--checkpoint", tmp_path / "nope", "--caption", "x", "--out", tmp_path / "x.png")
    assert code == 1
    assert "error[validation]" in capsys.readouterr().err


# -- style transfer / interpolate / evaluate ------------------------------------------


def test_style_transfer_png(workspace, tmp_path):
    root, _, data, _ = workspace
    query = next((data / "images").rglob("*.png"))
    out1, out2 = tmp_path / "s1.png", tmp_path / "s2.png"
    for out in (out1, out2):
        assert run("style-transfer", "--checkpoint", root / "runs" / "gan-gan-int-cls", "--style",
                   root / "runs" / "style-gan-int-cls", "--query", query, "--caption", "a red circle",
                   "--out", out) == 0
    assert out1.read_bytes() == out2.read_bytes()
    with Image.open(out1) as im:
        assert im.size == (32, 32)


def test_style_transfer_rejects_mismatched_generator(workspace, tmp_path, capsys):
    root, _, data, _ = workspace
    query = next((data / "images").rglob("*.png"))
    code = run("style-transfer", "--checkpoint", root / "runs" / "gan-gan", "--style",
               root / "runs" / "style-gan-int-cls", "--query", query, "--caption", "a red circle",
               "--out", tmp_path / "s.png")
    assert code == 1
    assert "error[validation]" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["sentence", "noise"])
def test_interpolate_two_steps_match_direct_generation(workspace, tmp_path, mode):
    root, _, _, _ = workspace
    ckpt = root / "runs" / "gan-gan-int-cls" / "checkpoints" / "last.pt"
    out = tmp_path / "i.png"
    assert run("interpolate", "--checkpoint", ckpt, "--mode", mode, "--caption-a", "a red circle",
               "--caption-b", "a blue square", "--steps", 2, "--seed", 4, "--out", out) == 0
    G, enc, _ = load_generator(ckpt)
    gen = torch.Generator().manual_seed(4)
    if mode == "sentence":
        z = torch.randn(1, 4, generator=gen).expand(2, -1)
        emb = enc.embed_text_cached(["a red circle", "a blue square"])
    else:
        z = torch.cat([torch.randn(1, 4, generator=gen), torch.randn(1, 4, generator=gen)])
        emb = enc.embed_text_cached(["a red circle"]).expand(2, -1)
    direct = generate(z, emb, G).numpy().transpose(0, 2, 3, 1)
    expected = np.concatenate([direct[0], direct[1]], axis=1)
    assert np.abs(load_png(out) - expected).max() <= 1 / 127.5 + 1e-6


def test_interpolate_one_step_is_usage_error(workspace, tmp_path, capsys):
    root, _, _, _ = workspace
    code = run("interpolate", "--checkpoint", root / "runs" / "gan-gan", "--caption-a", "a", "--caption-b", "b",
               "--steps", 1, "--out", tmp_path / "i.png")
    assert code == 1
    assert "error[usage]" in capsys.readouterr().err


def test_evaluate_four_variants(workspace):
    root, cfg, data, _ = workspace
    styles = []
    for regime in ("gan", "gan-cls", "gan-int", "gan-int-cls"):
        styles += ["--style", root / "runs" / f"style-{regime}"]
    assert run("evaluate", "--config", cfg, "--data", data, *styles, "--name", "ev", "--seed", 0) == 0
    report = json.loads((root / "runs" / "ev" / "report.json").read_text())
    variants = [r["variant"] for r in report["rows"]]
    assert variants == ["gan", "gan-cls", "gan-int", "gan-int-cls", "caption-baseline"]
    for row in report["rows"]:
        assert 0.0 <= row["auc"] <= 1.0
        assert len(row["fold_aucs"]) == 2
    text = (root / "runs" / "ev" / "report.txt").read_text().splitlines()
    assert len(text) == 6
    first = (root / "runs" / "ev" / "report.json").read_bytes()
    assert run("evaluate", "--config", cfg, "--data", data, *styles, "--name", "ev", "--seed", 0) == 0
    assert (root / "runs" / "ev" / "report.json").read_bytes() == first


def test_training_rerun_is_byte_identical(workspace):
    root, cfg, data, _ = workspace
    enc = root / "runs" / "enc" / "best"
    assert run("train-gan", "--config", cfg, "--data", data, "--encoder", enc, "--regime", "gan-int-cls",
               "--seed", 0, "--name", "again") == 0
    a = tree_digest(root / "runs" / "gan-gan-int-cls")
    b = tree_digest(root / "runs" / "again")
    config_a = json.loads((root / "runs" / "gan-gan-int-cls" / "config.json").read_text())
    config_b = json.loads((root / "runs" / "again" / "config.json").read_text())
    config_a.pop("name"), config_b.pop("name")
    assert config_a == config_b
    a.pop("config.json"), b.pop("config.json")
    assert a == b


# -- process-level behaviour ----------------------------------------------------------


def test_subprocess_exit_codes_and_help(tmp_path):
    env = dict(os.environ, TXT2IM_RUNS_DIR=str(tmp_path / "runs"))
    ok = subprocess.run([sys.executable, "-m", "txt2im", "--help"], capture_output=True, text=True, env=env)
    assert ok.returncode == 0
    for cmd in ("make-data", "train-encoder", "train-gan", "train-style", "generate", "style-transfer",
                "interpolate", "evaluate"):
        assert cmd in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "txt2im", "generate"], capture_output=True, text=True, env=env)
    assert bad.returncode == 1
    assert bad.stderr.strip().count("\n") == 0
    assert bad.stderr.startswith("txt2im: error[usage]:")


def test_runtime_abort_exit_code(workspace, capsys):
    root, cfg, data, _ = workspace
    enc = root / "runs" / "enc" / "best"
    code = run("train-gan", "--config", cfg, "--data", data, "--encoder", enc, "--name", "boom",
               "--set", "trainer.lr=1e30", "--epochs", 2)
    assert code == 2
    assert capsys.readouterr().err.startswith("txt2im: error[runtime]:")
    assert (root / "runs" / "boom" / "config.json").is_file()
