import json
import shutil

import numpy as np
import pytest
from scipy.io import wavfile

from diffspeech import cli
from diffspeech.config import save_config
from diffspeech.data import read_manifest, write_manifest
from diffspeech.pipeline import StageCheckpoint

from conftest import micro_config


@pytest.fixture(scope="module")
def run_dir(toy_corpus, tmp_path_factory):
    """A run directory prepared and trained through all three stages."""
    corpus, _, _ = toy_corpus
    root = tmp_path_factory.mktemp("run")
    save_config(micro_config(), root / "micro.yaml")
    run = root / "run"
    assert cli.main(["prepare", str(corpus / "manifest.tsv"), "--out", str(run), "--vocab",
                     str(corpus / "vocab.txt"), "--config", str(root / "micro.yaml")]) == 0
    for stage in ("ctap", "t2s", "s2s"):
        assert cli.main(["train", stage, "--run", str(run)]) == 0
    return run


def test_layout(run_dir):
    for kind in ("ctap", "duration", "semantic", "acoustic", "wave"):
        assert (run_dir / "checkpoints" / f"{kind}.pt").exists()
        assert (run_dir / "logs" / f"{kind}_loss.jsonl").exists()
        assert (run_dir / "logs" / f"{kind}_loss.png").exists()
    assert (run_dir / "config.yaml").exists() and (run_dir / "prepared" / "norm_stats.json").exists()
    assert not (run_dir / "train.lock").exists()


def test_prepare_rejects_bad_durations(toy_corpus, tmp_path, capsys):
    corpus, records, _ = toy_corpus
    bad = records[0]
    shifted = type(bad)(bad.path, bad.speaker, True, bad.phonemes, bad.durations[:-1] + (bad.durations[-1] + 5,), 1)
    write_manifest(tmp_path / "m.tsv", [shifted] + records[1:])
    code = cli.main(["prepare", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "run")])
    err = capsys.readouterr().err
    total = sum(bad.durations)
    assert code == 1 and "line 1" in err and str(total + 5) in err and str(total) in err


def test_prepare_accepts_unlabeled_and_is_idempotent(toy_corpus, tmp_path):
    corpus, records, _ = toy_corpus
    write_manifest(tmp_path / "m.tsv", records)
    args = ["prepare", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "run")]
    assert cli.main(args) == 0
    stats = (tmp_path / "run" / "prepared" / "norm_stats.json").read_bytes()
    cache = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "run" / "cache").glob("*.npy")}
    assert len(cache) == len(records)
    assert cli.main(args) == 0
    assert (tmp_path / "run" / "prepared" / "norm_stats.json").read_bytes() == stats
    assert {p.name: p.stat().st_mtime_ns for p in (tmp_path / "run" / "cache").glob("*.npy")} == cache
    assert len(read_manifest(tmp_path / "run" / "prepared" / "manifest.tsv")) == len(records)


def test_train_requires_ctap(toy_corpus, tmp_path, capsys):
    corpus, _, _ = toy_corpus
    assert cli.main(["prepare", str(corpus / "manifest.tsv"), "--out", str(tmp_path / "r")]) == 0
    assert cli.main(["train", "t2s", "--run", str(tmp_path / "r")]) == 1
    assert "'ctap'" in capsys.readouterr().err


def test_lock_blocks_second_trainer(run_dir, capsys):
    (run_dir / "train.lock").write_text("123")
    try:
        assert cli.main(["train", "ctap", "--run", str(run_dir)]) == 1
        assert "lock" in capsys.readouterr().err
    finally:
        (run_dir / "train.lock").unlink()


def test_resume_extends_history(run_dir, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(run_dir, run)
    before = StageCheckpoint.load(run / "checkpoints" / "ctap.pt")
    assert cli.main(["train", "ctap", "--run", str(run), "--set", f"train.ctap_steps={before.step + 3}"]) == 0
    after = StageCheckpoint.load(run / "checkpoints" / "ctap.pt")
    assert after.step == before.step + 3
    assert after.history[: before.step] == before.history
    lines = (run / "logs" / "ctap_loss.jsonl").read_text().splitlines()
    assert len(lines) == after.step


def test_unknown_config_key(run_dir):
    assert cli.main(["train", "ctap", "--run", str(run_dir), "--set", "train.lrr=1"]) == 1


def test_synth_deterministic_with_sidecar(run_dir, toy_corpus, tmp_path):
    corpus, records, symbols = toy_corpus
    phon = " ".join(symbols[i] for i in records[0].phonemes)
    outs = []
    for name in ("a.wav", "b.wav"):
        args = ["synth", "--run", str(run_dir), "--phonemes", phon, "--prompt", records[2].path,
                "--out", str(tmp_path / name), "--seed", "7", "--mel-image", str(tmp_path / (name + ".png"))]
        assert cli.main(args) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    meta = json.loads((tmp_path / "a.wav.json").read_text())
    assert meta["seed"] == 7 and meta["phonemes"] == phon.split()
    sr, data = wavfile.read(tmp_path / "a.wav")
    assert sr == 24000 and len(data) == sum(meta["durations"]) * 240
    assert (tmp_path / "a.wav.png").exists()


def test_synth_seeds_vary_durations(run_dir, toy_corpus, tmp_path):
    corpus, records, symbols = toy_corpus
    phon = " ".join(symbols[i] for i in records[1].phonemes)
    durs = set()
    for seed in range(4):
        out = tmp_path / f"s{seed}.wav"
        assert cli.main(["synth", "--run", str(run_dir), "--phonemes", phon, "--prompt", records[2].path,
                         "--out", str(out), "--seed", str(seed)]) == 0
        durs.add(tuple(json.loads(out.with_name(out.name + ".json").read_text())["durations"]))
    assert len(durs) > 1


def test_synth_text_with_lexicon(run_dir, toy_corpus, tmp_path):
    _, records, symbols = toy_corpus
    (tmp_path / "lex.txt").write_text("hello p1 p2 p3\nworld p4 p5\n")
    out = tmp_path / "t.wav"
    assert cli.main(["synth", "--run", str(run_dir), "--text", "Hello, world!", "--lexicon",
                     str(tmp_path / "lex.txt"), "--prompt", records[0].path, "--out", str(out)]) == 0
    assert json.loads(out.with_name("t.wav.json").read_text())["phonemes"] == ["p1", "p2", "p3", "p4", "p5"]
    assert cli.main(["synth", "--run", str(run_dir), "--text", "hello", "--prompt", records[0].path,
                     "--out", str(out)]) == 1


def test_synth_unknown_symbol(run_dir, toy_corpus, tmp_path, capsys):
    _, records, _ = toy_corpus
    code = cli.main(["synth", "--run", str(run_dir), "--phonemes", "p1 xq9 p2", "--prompt", records[0].path,
                     "--out", str(tmp_path / "x.wav")])
    assert code == 1 and "xq9" in capsys.readouterr().err
    assert not (tmp_path / "x.wav").exists()


def test_eval_self_check_is_zero(run_dir, tmp_path):
    report = tmp_path / "self.jsonl"
    assert cli.main(["eval", "--run", str(run_dir), "--self-check", "--report", str(report)]) == 0
    rows = [json.loads(l) for l in report.read_text().splitlines()]
    assert len(rows) - 1 == 2
    assert rows[-1]["msep"] == 0.0 and rows[-1]["msed"] == 0.0


def test_eval_deterministic(run_dir, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["eval", "--run", str(run_dir), "--report", str(a), "--seed", "3"]) == 0
    assert cli.main(["eval", "--run", str(run_dir), "--report", str(b), "--seed", "3"]) == 0
    assert a.read_text() == b.read_text()


def test_internal_error_exit_code(run_dir, monkeypatch):
    def boom(args):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli, "cmd_eval", boom)
    assert cli.main(["eval", "--run", str(run_dir), "--self-check"]) == 2


def test_worker_env(run_dir, monkeypatch, tmp_path):
    import torch
    threads = torch.get_num_threads()
    monkeypatch.setenv(cli.WORKERS_ENV, "1")
    try:
        assert cli.main(["eval", "--run", str(run_dir), "--self-check", "--report", str(tmp_path / "r")]) == 0
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(threads)


def test_missing_manifest(tmp_path):
    assert cli.main(["prepare", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "r")]) == 1
