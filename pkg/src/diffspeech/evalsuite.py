"""Prosody metrics (pitch and duration MSE) and diagnostic artifacts."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import SAMPLE_RATE, Waveform, n_frames


class MetricUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class F0Config:
    hop: int = 240
    window_ms: float = 25.0
    fmin: float = 50.0
    fmax: float = 600.0
    voicing_threshold: float = 0.3
    silence_rms: float = 1e-4


def _nccf(frames: np.ndarray, win: int, lags: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of each frame's first ``win`` samples with lagged copies."""
    ref = frames[:, :win]
    e_ref = np.einsum("ij,ij->i", ref, ref)
    out = np.zeros((frames.shape[0], len(lags)))
    for j, lag in enumerate(lags):
        seg = frames[:, lag:lag + win]
        denom = np.sqrt(e_ref * np.einsum("ij,ij->i", seg, seg))
        num = np.einsum("ij,ij->i", ref, seg)
        out[:, j] = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return out


def extract_f0(w: Waveform, cfg: F0Config = F0Config()):
    """Per-hop F0 (Hz) and voicing flags by normalized autocorrelation.

    Frames are centered at multiples of the hop, so the frame count equals the
    mel frame count of the same waveform. Unvoiced frames report F0 = 0.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    sr = w.rate
    win = int(round(cfg.window_ms * 1e-3 * sr))
    lag_min = int(np.floor(sr / cfg.fmax))
    lag_max = int(np.ceil(sr / cfg.fmin))
    lags = np.arange(lag_min - 1, lag_max + 2)
    count = n_frames(len(x), cfg.hop)
    span = win + lags[-1]
    padded = np.pad(x, (win // 2, span))
    starts = np.arange(count) * cfg.hop
    frames = padded[starts[:, None] + np.arange(span)[None, :]]
    r = _nccf(frames, win, lags)
    rms = np.sqrt(np.mean(frames[:, :win] ** 2, axis=1))

    f0 = np.zeros(count)
    voiced = np.zeros(count, dtype=bool)
    inner = r[:, 1:-1]
    peaks = (inner >= r[:, :-2]) & (inner >= r[:, 2:])
    for i in range(count):
        if rms[i] < cfg.silence_rms:
            continue
        cand = np.flatnonzero(peaks[i]) + 1
        if cand.size == 0:
            continue
        best = r[i, cand].max()
        if best < cfg.voicing_threshold:
            continue
        # earliest peak close to the best one avoids sub-harmonic (octave-down) picks
        j = cand[np.argmax(r[i, cand] >= 0.9 * best)]
        a, b, c = r[i, j - 1], r[i, j], r[i, j + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if den != 0 else 0.0
        lag = lags[j] + float(np.clip(shift, -0.5, 0.5))
        f0[i] = sr / lag
        voiced[i] = cfg.fmin <= f0[i] <= cfg.fmax
        if not voiced[i]:
            f0[i] = 0.0
    return f0, voiced


def msep_from_tracks(f0_ref, v_ref, f0_hyp, v_hyp) -> float:
    n = min(len(f0_ref), len(f0_hyp))
    both = np.asarray(v_ref[:n]) & np.asarray(v_hyp[:n])
    if not both.any():
        raise MetricUndefinedError("no frames are voiced in both signals")
    d = np.asarray(f0_ref[:n])[both] - np.asarray(f0_hyp[:n])[both]
    return float(np.mean(d ** 2))


def msep(ref: Waveform, hyp: Waveform, cfg: F0Config = F0Config()) -> float:
    """Mean squared F0 difference (Hz^2) over frames voiced in both signals."""
    return msep_from_tracks(*extract_f0(ref, cfg), *extract_f0(hyp, cfg))


def msed(ref_durations, hyp_durations) -> float:
    """Mean squared per-phoneme duration difference (frames^2)."""
    a = np.asarray(ref_durations, dtype=np.float64)
    b = np.asarray(hyp_durations, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"duration sequences differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricUndefinedError("empty duration sequences")
    return float(np.mean((a - b) ** 2))


@dataclass
class UtteranceScore:
    utterance: str
    msep: Optional[float]
    msed: Optional[float]
    voiced_frames: int = 0


@dataclass
class ProsodyReport:
    msep: Optional[float]
    msed: Optional[float]
    utterances: list = field(default_factory=list)

    @classmethod
    def aggregate(cls, scores: Sequence[UtteranceScore]) -> "ProsodyReport":
        """Corpus MSEP is frame-weighted; corpus MSED is averaged per utterance."""
        ps = [(s.msep, s.voiced_frames) for s in scores if s.msep is not None]
        ds = [s.msed for s in scores if s.msed is not None]
        weight = sum(w for _, w in ps)
        msep_all = sum(v * w for v, w in ps) / weight if weight else None
        return cls(msep_all, float(np.mean(ds)) if ds else None, list(scores))

    def table(self) -> str:
        fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
        width = max([len("utterance")] + [len(s.utterance) for s in self.utterances])
        lines = [f"{'utterance':<{width}}  {'MSEP (Hz^2)':>12}  {'MSED (frames^2)':>16}"]
        for s in self.utterances:
            lines.append(f"{s.utterance:<{width}}  {fmt(s.msep):>12}  {fmt(s.msed):>16}")
        lines.append(f"{'ALL':<{width}}  {fmt(self.msep):>12}  {fmt(self.msed):>16}")
        return "\n".join(lines)

    def write(self, path) -> None:
        """``path`` gets the JSON-lines records; ``path.txt`` the table."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = [json.dumps(asdict(s)) for s in self.utterances]
        rows.append(json.dumps({"utterance": "ALL", "msep": self.msep, "msed": self.msed}))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(rows) + "\n")
        os.replace(tmp, path)
        path.with_name(path.name + ".txt").write_text(self.table() + "\n")


def score_utterance(name: str, ref: Waveform, hyp: Waveform, ref_durations=None, hyp_durations=None,
                    cfg: F0Config = F0Config()) -> UtteranceScore:
    f_ref, v_ref = extract_f0(ref, cfg)
    f_hyp, v_hyp = extract_f0(hyp, cfg)
    n = min(len(v_ref), len(v_hyp))
    voiced = int((v_ref[:n] & v_hyp[:n]).sum())
    p = msep_from_tracks(f_ref, v_ref, f_hyp, v_hyp) if voiced else None
    d = msed(ref_durations, hyp_durations) if ref_durations is not None and hyp_durations is not None else None
    return UtteranceScore(name, p, d, voiced)


def duration_diversity(totals: Sequence[float]) -> dict:
    t = np.asarray(totals, dtype=np.float64)
    return {"n": int(t.size), "mean": float(t.mean()), "var": float(t.var()),
            "min": float(t.min()), "max": float(t.max())}


# ---------------------------------------------------------------- plots

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_loss_curve(history: Sequence[float], path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(history) + 1), history, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_mel(mel: np.ndarray, path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3))
    im = ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
