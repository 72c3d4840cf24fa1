"""Train every stage on a toy corpus, then synthesize.

Two of the ten utterances carry phoneme labels; the rest are speech only.
This takes roughly six minutes on one CPU core. Outputs go to demos/out/.
"""
import logging
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from diffspeech.data import FeatureStore
from diffspeech.evalsuite import plot_mel
from diffspeech.features import load_wav, save_wav
from diffspeech.pipeline import Synthesizer, fit_length, train_ctap, train_semantic_to_speech, train_text_to_semantic
from diffspeech.toy import make_toy_corpus, toy_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

with tempfile.TemporaryDirectory() as tmp:
    records, _ = make_toy_corpus(tmp, n_utterances=10, n_labeled=2, phonemes_range=(8, 12), duration_range=(5, 12))
    cfg, store = toy_config(), FeatureStore()
    t0 = time.time()
    ctap = train_ctap(records, store, cfg)
    ckpts = {"ctap": ctap, **train_text_to_semantic(records, store, cfg, ctap),
             **train_semantic_to_speech(records, store, cfg, ctap)}
    print(f"trained {sorted(ckpts)} in {time.time() - t0:.0f}s")

    syn = Synthesizer(ckpts, cfg)
    rec = next(r for r in records if r.labeled)
    prompt = load_wav(records[-1].path)
    fixed = syn.synthesize(rec.phonemes, prompt, torch.Generator().manual_seed(0), durations=rec.durations)
    gt = ctap.stats().normalize(fit_length(store.mel(rec.path), sum(rec.durations)))
    print(f"normalized mel MSE with ground-truth durations: {np.mean((fixed.mel_normalized - gt) ** 2):.4f}")
    plot_mel(fixed.mel_normalized, out / "e2e_generated_mel.png", "generated (normalized)")
    plot_mel(gt, out / "e2e_reference_mel.png", "reference (normalized)")

    for seed in range(3):
        res = syn.synthesize(rec.phonemes, prompt, torch.Generator().manual_seed(seed))
        save_wav(out / f"e2e_seed{seed}.wav", res.waveform)
        print(f"seed {seed}: durations {res.durations.tolist()}, {len(res.waveform.samples)} samples")
