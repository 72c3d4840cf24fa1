"""WAV I/O and the log-mel front end (24 kHz, 40 bands, 960/240 framing)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 24000


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_mels: int = 40
    frame_size: int = 960
    hop: int = 240
    n_fft: int = 1024
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


def load_wav(path, rate: int = SAMPLE_RATE) -> Waveform:
    """Read PCM/float WAV as mono float64 in [-1, 1], resampled to ``rate``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if sr != rate and len(x):
        g = gcd(int(sr), int(rate))
        x = resample_poly(x, rate // g, sr // g)
    return Waveform(x, rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit mono PCM."""
    x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(tmp, int(w.rate), pcm)
    os.replace(tmp, path)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: FeatureConfig) -> np.ndarray:
    """n_mels + 2 frequencies (Hz): lower edge, centers, upper edge of the triangles."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters on the HTK mel scale."""
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    edges = mel_band_edges(cfg)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def n_frames(n_samples: int, hop: int = 240) -> int:
    return 1 + n_samples // hop


def stft_magnitude(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """(frames, n_fft // 2 + 1) magnitudes of a centered, reflect-padded STFT."""
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad)
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft)[:: cfg.hop]
    window = np.zeros(cfg.n_fft)
    off = (cfg.n_fft - cfg.frame_size) // 2
    window[off:off + cfg.frame_size] = np.hanning(cfg.frame_size + 1)[:-1]
    return np.abs(np.fft.rfft(frames * window, axis=-1))


def wav_to_mel(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """(frames, n_mels) log-mel magnitude; frames = 1 + len // hop."""
    if w.rate != cfg.sample_rate:
        raise AudioFormatError(f"expected {cfg.sample_rate} Hz audio, got {w.rate} Hz")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    mel = stft_magnitude(x, cfg) @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


@dataclass
class NormStats:
    """Band-wise mean/std used to standardize log-mels."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, mel):
        return (mel - self.mean) / self.std

    def denormalize(self, mel):
        return mel * self.std + self.mean

    @classmethod
    def from_mels(cls, mels, min_std: float = 1e-3) -> "NormStats":
        allf = np.concatenate([np.asarray(m) for m in mels], axis=0)
        return cls(allf.mean(axis=0), np.maximum(allf.std(axis=0), min_std))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))
