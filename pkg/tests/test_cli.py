"""CLI tests driven through main() with explicit argv: exit-code contract,
vocabulary/synthesis commands, a tiny end-to-end pretrain/eval/finetune cycle,
run-directory locking and the sweep command."""

import json

import pytest

from crossmodal.cli import main


# small but end-to-end: 128 px images so the desk encoder applies
FAST = ["--set", "max_epochs=1", "--set", "batch_size=16",
        "--set", "max_len=32"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for split, n in (("train", 32), ("test", 16)):
        rc = main(["synth", "--out", str(root), "--num", str(n),
                   "--latent-dim", "4", "--image-size", "128",
                   "--seed", "3", "--split", split])
        assert rc == 0
    return root


@pytest.fixture(scope="module")
def pretrained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "pre"
    rc = main(["pretrain", "--data", str(data_dir), "--out", str(out),
               "--ablation", "CEM_s", *FAST])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# build-vocab
# ---------------------------------------------------------------------------

def test_build_vocab_from_manifest(data_dir, tmp_path, capsys):
    out = tmp_path / "vocab.tsv"
    rc = main(["build-vocab", str(data_dir / "manifest-train.jsonl"), str(out)])
    assert rc == 0
    assert "vocabulary size:" in capsys.readouterr().out
    assert out.exists()
    # rerun is byte-identical
    out2 = tmp_path / "vocab2.tsv"
    main(["build-vocab", str(data_dir / "manifest-train.jsonl"), str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_build_vocab_plain_text(tmp_path):
    src = tmp_path / "corpus.txt"
    src.write_text("the lungs are clear .\n" * 4)
    out = tmp_path / "vocab.tsv"
    assert main(["build-vocab", str(src), str(out), "--min-count", "2"]) == 0
    text = out.read_text()
    assert "lungs" in text


def test_build_vocab_missing_path(tmp_path):
    rc = main(["build-vocab", str(tmp_path / "nope.jsonl"),
               str(tmp_path / "v.tsv")])
    assert rc == 1


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["synth", "--out", str(d), "--num", "6", "--latent-dim",
                     "4", "--image-size", "32", "--seed", "9"]) == 0
    ma = (a / "manifest-train.jsonl").read_bytes()
    assert ma == (b / "manifest-train.jsonl").read_bytes()
    assert len(ma.splitlines()) == 7       # schema header + 6 samples


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def test_pretrain_writes_run_artifacts(pretrained, capsys):
    assert (pretrained / "config.json").exists()
    assert (pretrained / "last.ckpt").exists()
    assert (pretrained / "best.ckpt").exists()
    assert (pretrained / "metrics.jsonl").exists()
    cfg = json.loads((pretrained / "config.json").read_text())
    assert cfg["setting"] == "CEM_s"
    assert cfg["max_epochs"] == 1          # --set override applied


def test_pretrain_lock_file(data_dir, pretrained):
    rc = main(["pretrain", "--data", str(data_dir), "--out", str(pretrained),
               "--ablation", "CEM_s", *FAST])
    assert rc == 1                          # locked
    rc = main(["pretrain", "--data", str(data_dir), "--out", str(pretrained),
               "--ablation", "CEM_s", "--force", *FAST])
    assert rc == 0


def test_pretrain_resume_flag(data_dir, pretrained, tmp_path):
    rc = main(["pretrain", "--data", str(data_dir), "--out", str(pretrained),
               "--ablation", "CEM_s", "--resume",
               str(pretrained / "last.ckpt"),
               "--set", "max_epochs=2", "--set", "batch_size=16",
               "--set", "max_len=32"])
    assert rc == 0


def test_pretrain_rejects_unknown_ablation(data_dir, tmp_path):
    rc = main(["pretrain", "--data", str(data_dir), "--out",
               str(tmp_path / "x"), "--ablation", "BOGUS"])
    assert rc == 1


def test_pretrain_rejects_bad_override(data_dir, tmp_path):
    rc = main(["pretrain", "--data", str(data_dir), "--out",
               str(tmp_path / "x"), "--set", "no_such_field=1"])
    assert rc == 1


def test_pretrain_empty_data_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = main(["pretrain", "--data", str(empty), "--out",
               str(tmp_path / "run"), *FAST])
    assert rc == 2


def test_run_root_env(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CROSSMODAL_RUN_ROOT", str(tmp_path / "root"))
    rc = main(["pretrain", "--data", str(data_dir), "--ablation", "CEM_s",
               *FAST])
    assert rc == 0
    assert (tmp_path / "root" / "pretrain-CEM_s-s0" / "last.ckpt").exists()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_prints_table_and_json(pretrained, data_dir, tmp_path, capsys):
    out_json = tmp_path / "retrieval.json"
    rc = main(["eval", "--checkpoint", str(pretrained / "best.ckpt"),
               "--data", str(data_dir), "--subset", "8",
               "--out", str(out_json), "--k", "1,5",
               "--set", "max_len=32"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "R@1" in out and "I2T" in out and "T2I" in out
    payload = json.loads(out_json.read_text())
    assert len(payload) == 2               # one subset, two directions
    for rep in payload:
        assert set(rep["recalls"]) == {"1", "5"}


def test_eval_corrupt_checkpoint(pretrained, data_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((pretrained / "best.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    bad.write_bytes(bytes(raw))
    rc = main(["eval", "--checkpoint", str(bad), "--data", str(data_dir)])
    assert rc == 2


def test_eval_unknown_split(pretrained, data_dir):
    rc = main(["eval", "--checkpoint", str(pretrained / "best.ckpt"),
               "--data", str(data_dir), "--split", "val",
               "--set", "max_len=32"])
    assert rc == 2


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def test_finetune_requires_init_choice(data_dir, tmp_path):
    rc = main(["finetune", "--data", str(data_dir), "--out",
               str(tmp_path / "ft")])
    assert rc == 1


def test_finetune_from_scratch(data_dir, tmp_path, capsys):
    rc = main(["finetune", "--data", str(data_dir), "--out",
               str(tmp_path / "ft"), "--from-scratch", "--epochs", "1",
               "--num-labels", "4"])
    assert rc == 0
    assert "final macro AUC:" in capsys.readouterr().out
    assert (tmp_path / "ft" / "classifier.ckpt").exists()


def test_finetune_from_checkpoint(data_dir, pretrained, tmp_path, capsys):
    rc = main(["finetune", "--data", str(data_dir), "--out",
               str(tmp_path / "ft"), "--init", str(pretrained / "best.ckpt"),
               "--epochs", "1", "--num-labels", "4",
               "--set", "max_len=32"])
    assert rc == 0
    assert "checkpoint:" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_selects_best_cell(data_dir, tmp_path, capsys):
    grid = {"base": {"max_epochs": 1, "batch_size": 16, "max_len": 32,
                     "setting": "CEM_s"},
            "grid": [{"gamma": 1.0}, {"gamma": 4.0}]}
    grid_file = tmp_path / "grid.json"
    grid_file.write_text(json.dumps(grid))
    out = tmp_path / "sweep"
    rc = main(["sweep", str(grid_file), "--data", str(data_dir),
               "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "best cell:" in text
    rows = [json.loads(x) for x in
            (out / "sweep.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert {r["gamma"] for r in rows} == {1.0, 4.0}
    assert all("r1_sum" in r for r in rows)


def test_sweep_empty_grid(data_dir, tmp_path):
    grid_file = tmp_path / "grid.json"
    grid_file.write_text(json.dumps({"grid": []}))
    rc = main(["sweep", str(grid_file), "--data", str(data_dir),
               "--out", str(tmp_path / "s")])
    assert rc == 1
