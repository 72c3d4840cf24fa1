import copy
import logging

import numpy as np
import pytest
import torch

from diffspeech.data import DataError, FeatureStore, UtteranceRecord
from diffspeech.diffusion import sample
from diffspeech.features import load_wav
from diffspeech.pipeline import (CheckpointError, DurationStats, StageCheckpoint, Synthesizer, load_ctap,
                                 load_denoiser, load_prompt_encoder, train_ctap, train_semantic_to_speech,
                                 train_text_to_semantic)

from conftest import micro_config


class RecordingRecord:
    """Manifest record that logs every read of its supervision fields."""

    def __init__(self, rec, log):
        self._rec, self._log = rec, log
        self.path, self.speaker, self.line = rec.path, rec.speaker, rec.line

    @property
    def labeled(self):
        self._log.append("labeled")
        return self._rec.labeled

    @property
    def phonemes(self):
        self._log.append("phonemes")
        return self._rec.phonemes

    @property
    def durations(self):
        self._log.append("durations")
        return self._rec.durations


def state_snapshot(ckpt):
    return {k: v.clone() for k, v in ckpt.state["model"].items()}


def test_recording_double_detects_access(micro_run):
    cfg, store, records, ckpts = micro_run
    log = []
    wrapped = [RecordingRecord(r, log) for r in records]
    train_text_to_semantic(wrapped, store, micro_config(duration_steps=1, semantic_steps=1), ckpts["ctap"])
    assert "durations" in log and "phonemes" in log


def test_semantic_to_speech_never_reads_labels(micro_run):
    cfg, store, records, ckpts = micro_run
    log = []
    wrapped = [RecordingRecord(r, log) for r in records]
    train_semantic_to_speech(wrapped, store, micro_config(acoustic_steps=2, wave_steps=2), ckpts["ctap"])
    assert log == []


def test_downstream_training_leaves_ctap_untouched(micro_run):
    cfg, store, records, ckpts = micro_run
    ctap = ckpts["ctap"]
    before = state_snapshot(ctap)
    live_before = [p.detach().clone() for p in load_ctap(ctap).parameters()]
    train_text_to_semantic(records, store, micro_config(duration_steps=2, semantic_steps=2), ctap)
    train_semantic_to_speech(records, store, micro_config(acoustic_steps=2, wave_steps=2), ctap)
    after = ctap.state["model"]
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(torch.equal(a, b) for a, b in zip(live_before, load_ctap(ctap).parameters()))


def test_checkpoint_round_trip(micro_run, tmp_path):
    _, _, _, ckpts = micro_run
    for kind, ck in ckpts.items():
        ck.save(tmp_path / f"{kind}.pt")
        back = StageCheckpoint.load(tmp_path / f"{kind}.pt")
        assert back.kind == kind and back.step == ck.step and back.history == ck.history
    assert not list(tmp_path.glob("*.tmp"))
    ctap_a, ctap_b = load_ctap(ckpts["ctap"]).eval(), load_ctap(StageCheckpoint.load(tmp_path / "ctap.pt")).eval()
    mel = torch.randn(1, 20, 40)
    assert torch.equal(ctap_a.encode_speech(mel), ctap_b.encode_speech(mel))
    da, db = load_denoiser(ckpts["acoustic"]), load_denoiser(StageCheckpoint.load(tmp_path / "acoustic.pt"))
    x, s, p = torch.randn(1, 7, 40), torch.randn(1, 7, 32), torch.randn(1, 64)
    assert torch.equal(da(x, torch.tensor([3]), p, s), db(x, torch.tensor([3]), p, s))


def test_stage_shapes(micro_run):
    cfg, _, _, ckpts = micro_run
    dur = load_denoiser(ckpts["duration"]).config
    sem = load_denoiser(ckpts["semantic"]).config
    ac = load_denoiser(ckpts["acoustic"]).config
    wave = load_denoiser(ckpts["wave"]).config
    d = cfg.ctap.d
    assert (dur.out_channels, dur.cond_dim, dur.prompt_dim) == (1, d, None)
    assert (sem.out_channels, sem.cond_dim, sem.prompt_dim) == (d, d, None)
    assert (ac.out_channels, ac.cond_dim, ac.upsample, ac.prompt_dim) == (40, d, 1, 64)
    assert (wave.out_channels, wave.cond_dim, wave.upsample) == (1, 40, 240)


def test_synthesis_length_and_bypass(micro_run):
    cfg, _, records, ckpts = micro_run
    syn = Synthesizer(ckpts, cfg)
    rec = records[0]
    prompt = load_wav(records[3].path)
    res = syn.synthesize(rec.phonemes, prompt, torch.Generator().manual_seed(0))
    assert len(res.waveform) == int(res.durations.sum()) * 240
    assert res.waveform.rate == 24000 and np.all(res.durations >= 1)
    a = syn.synthesize(rec.phonemes, prompt, torch.Generator().manual_seed(1), durations=rec.durations)
    b = syn.synthesize(rec.phonemes, prompt, torch.Generator().manual_seed(1), durations=rec.durations)
    assert a.durations.tolist() == list(rec.durations)
    assert np.array_equal(a.waveform.samples, b.waveform.samples)
    assert a.mel.shape == (sum(rec.durations), 40)


def test_synthesis_errors(micro_run):
    cfg, _, records, ckpts = micro_run
    syn = Synthesizer(ckpts, cfg)
    with pytest.raises(ValueError):
        syn.synthesize([], load_wav(records[0].path), torch.Generator())
    swapped = dict(ckpts, semantic=ckpts["acoustic"])
    with pytest.raises(CheckpointError):
        Synthesizer(swapped, cfg)
    with pytest.raises(CheckpointError):
        Synthesizer({k: v for k, v in ckpts.items() if k != "wave"}, cfg)


def test_duration_scale_stretches(micro_run):
    cfg, _, records, ckpts = micro_run
    syn = Synthesizer(ckpts, cfg)
    ids = records[0].phonemes
    base = syn.predict_durations(ids, torch.Generator().manual_seed(4))
    slow = syn.predict_durations(ids, torch.Generator().manual_seed(4), duration_scale=2.0)
    assert slow.sum() > base.sum()


def test_prompt_changes_generated_mel(micro_run):
    cfg, _, records, ckpts = micro_run
    syn = Synthesizer(ckpts, cfg)
    enc = load_prompt_encoder(ckpts["acoustic"])
    assert all(torch.equal(a, b) for a, b in zip(enc.parameters(), syn.prompt_encoder.parameters()))
    S = torch.randn(1, 12, cfg.ctap.d)
    mels = []
    for spk in (records[0], records[1]):
        g = syn.prompt_embedding(FeatureStore().mel(spk.path), torch.Generator().manual_seed(0))
        mels.append(sample((1, 12, 40), S, g, syn.models["acoustic"], syn.schedules["acoustic"],
                           torch.Generator().manual_seed(5)))
    assert (mels[0] - mels[1]).abs().mean() > 0


def test_duration_stats_codec():
    st = DurationStats.fit([torch.tensor([3, 5, 8, 13])])
    d = torch.tensor([1, 4, 9, 20])
    assert torch.equal(st.decode(st.encode(d)), d)
    assert st.decode(torch.tensor([-100.0])).item() == 1
    assert DurationStats.fit([torch.tensor([5, 5])]).std == 0.1


def test_missing_labels_and_supervision(micro_run, tmp_path):
    cfg, store, records, ckpts = micro_run
    unlabeled = [r for r in records if not r.labeled]
    with pytest.raises(DataError):
        train_ctap(unlabeled, store, cfg)
    broken = UtteranceRecord(records[0].path, "s", True, records[0].phonemes, None, 1)
    with pytest.raises(DataError):
        train_text_to_semantic([broken], store, cfg, ckpts["ctap"])


def test_short_utterances_skipped(micro_run, caplog):
    cfg, store, records, ckpts = micro_run
    lengths = sorted(store.mel(r.path).shape[0] for r in records)
    crop = lengths[1] + 1
    c = micro_config(acoustic_steps=1, wave_steps=1, acoustic_crop_frames=crop)
    with caplog.at_level(logging.WARNING, logger="diffspeech.pipeline"):
        train_semantic_to_speech(records, store, c, ckpts["ctap"])
    assert sum("skipping" in m and "acoustic" in m for m in caplog.messages) == 2
    with pytest.raises(DataError):
        train_semantic_to_speech(records, store, micro_config(acoustic_crop_frames=10_000), ckpts["ctap"])


def test_resume_continues_history(toy_corpus):
    _, records, _ = toy_corpus
    store = FeatureStore()
    full = train_ctap(records, store, micro_config(ctap_steps=6))
    saved = []
    train_ctap(records, store, micro_config(ctap_steps=6, checkpoint_every=3), checkpoint_fn=saved.append)
    assert [c.step for c in saved] == [3]
    resumed = train_ctap(records, store, micro_config(ctap_steps=6), resume=saved[0])
    assert resumed.history[:3] == saved[0].history
    assert resumed.history == full.history
    assert all(torch.equal(full.state["model"][k], resumed.state["model"][k]) for k in full.state["model"])


def test_training_is_reproducible(toy_corpus):
    _, records, _ = toy_corpus
    a = train_ctap(records, FeatureStore(), micro_config())
    b = train_ctap(records, FeatureStore(), micro_config())
    assert a.history == b.history
