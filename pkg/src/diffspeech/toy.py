"""Synthetic speech-like corpus for smoke tests and overfitting runs.

Each phoneme symbol owns a two-formant spectral envelope (a few are noise
excited); each speaker owns a pitch range and spectral tilt. Utterances are
rendered as harmonic sums whose envelope follows the phoneme timeline, so the
mel frames carry phoneme identity and the pitch carries speaker identity.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import UtteranceRecord, write_manifest, write_vocab
from .features import SAMPLE_RATE, Waveform, save_wav

HOP = 240


def phoneme_inventory(vocab_size: int, seed: int = 1234):
    rng = np.random.default_rng(seed)
    f1 = rng.uniform(250, 900, vocab_size)
    f2 = rng.uniform(1000, 3200, vocab_size)
    noisy = np.zeros(vocab_size, dtype=bool)
    noisy[::5] = True
    return f1, f2, noisy


def _envelope(freqs, f1, f2):
    return np.exp(-0.5 * ((freqs - f1) / 120.0) ** 2) + 0.6 * np.exp(-0.5 * ((freqs - f2) / 200.0) ** 2) + 0.02


def render_utterance(phonemes, durations, f0_base: float, tilt: float, rng: np.random.Generator,
                     vocab_size: int, hop: int = HOP, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Waveform of exactly sum(durations) * hop - 1 samples (so mel frames == sum(durations))."""
    f1, f2, noisy = phoneme_inventory(vocab_size)
    n = int(sum(durations)) * hop - 1
    ph_frame = np.repeat(np.asarray(phonemes), durations)
    ph = ph_frame[np.minimum(np.arange(n) // hop, len(ph_frame) - 1)]
    t = np.arange(n) / sr
    f0 = f0_base * (1.0 + 0.08 * np.sin(2 * np.pi * 1.3 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(n)
    for h in range(1, int(5000 // f0_base) + 1):
        amp = _envelope(h * f0, f1[ph], f2[ph]) * h ** (-tilt)
        out += amp * np.sin(h * phase)
    # noise-excited phonemes: replace the harmonic source with shaped noise
    if noisy[ph].any():
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1 / sr)
        hiss = np.fft.irfft(spec * (freqs > 2500), n) * 0.8
        out = np.where(noisy[ph], hiss, out)
    fade = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / 120.0)
    out *= fade
    return 0.5 * out / max(np.abs(out).max(), 1e-9)


def make_toy_corpus(out_dir, n_utterances: int = 10, n_labeled: int = 2, vocab_size: int = 12,
                    n_speakers: int = 2, phonemes_range=(6, 10), duration_range=(4, 12),
                    seed: int = 0) -> tuple[list[UtteranceRecord], list[str]]:
    """Write WAVs, ``manifest.tsv`` and ``vocab.txt`` into ``out_dir``.

    The first ``n_labeled`` records are labeled; the rest carry no phonemes.
    """
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = [(110.0 + 70.0 * i, 0.6 + 0.5 * i) for i in range(n_speakers)]
    records = []
    for i in range(n_utterances):
        k = int(rng.integers(phonemes_range[0], phonemes_range[1] + 1))
        ids = [int(rng.integers(vocab_size))]
        while len(ids) < k:
            nxt = int(rng.integers(vocab_size))
            if nxt != ids[-1]:
                ids.append(nxt)
        durs = [int(d) for d in rng.integers(duration_range[0], duration_range[1] + 1, k)]
        spk = i % n_speakers
        f0, tilt = speakers[spk]
        wav = render_utterance(ids, durs, f0, tilt, rng, vocab_size)
        path = out_dir / "wavs" / f"utt{i:03d}.wav"
        save_wav(path, Waveform(wav, SAMPLE_RATE))
        labeled = i < n_labeled
        records.append(UtteranceRecord(
            path=str(path), speaker=f"spk{spk}", labeled=labeled,
            phonemes=tuple(ids) if labeled else None, durations=tuple(durs) if labeled else None,
            line=i + 1,
        ))
    symbols = [f"p{i}" for i in range(vocab_size)]
    write_manifest(out_dir / "manifest.tsv", records)
    write_vocab(out_dir / "vocab.txt", symbols)
    return records, symbols


def toy_config(**train_overrides):
    """Small-network configuration sized for CPU overfitting runs on a toy corpus.

    Residual width is kept well above the data width (40 mel bands, 32-d
    semantic frames); at equal widths the gated layers fit the noise poorly.
    """
    from .config import from_dict

    train = {"lr": 1e-3, "batch_size": 12, "ctap_steps": 200, "duration_steps": 300,
             "semantic_steps": 1500, "acoustic_steps": 2000, "wave_steps": 300,
             "acoustic_crop_frames": 40, "wave_crop_samples": 40 * HOP, "checkpoint_every": 0}
    train.update(train_overrides)
    small = {"step_embed_dim": 32, "step_hidden": 64, "cond_encoder_layers": 0}
    return from_dict({
        "vocab_size": 12,
        "ctap": {"d": 32, "phoneme_dim": 32, "speech_layers": 2, "phoneme_layers": 2, "heads": 2,
                 "ff_dim": 128, "decoder_hidden": 64},
        "prompt": {"conv_channels": [4, 4, 8, 8, 16, 16], "feature_dim": 32},
        "denoisers": {
            "duration": {"n_layers": 4, "n_blocks": 1, "channels": 16, **small},
            "semantic": {"n_layers": 10, "n_blocks": 2, "channels": 128, **small},
            "acoustic": {"n_layers": 10, "n_blocks": 2, "channels": 128, **small},
            "wave": {"n_layers": 6, "n_blocks": 1, "channels": 16, **small},
        },
        "train": train,
    })
