"""Manifests, vocabularies and a cached feature store."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .features import FeatureConfig, Waveform, load_wav, wav_to_mel


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    path: str
    speaker: str = ""
    labeled: bool = False
    phonemes: Optional[tuple[int, ...]] = None
    durations: Optional[tuple[int, ...]] = None
    line: int = 0


@dataclass(frozen=True)
class SpeechOnlyRecord:
    """What the unsupervised stage is allowed to see of an utterance."""

    path: str
    speaker: str = ""


def speech_only(record) -> SpeechOnlyRecord:
    return SpeechOnlyRecord(path=record.path, speaker=record.speaker)


def _ints(field: str) -> Optional[tuple[int, ...]]:
    field = field.strip()
    return tuple(int(v) for v in field.split()) if field else None


def parse_manifest_line(line: str, base: Path, lineno: int = 0) -> UtteranceRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 3:
        raise DataError(f"line {lineno}: expected at least 3 tab-separated fields, got {len(parts)}")
    parts += [""] * (5 - len(parts))
    path, speaker, flag, phonemes, durations = parts[:5]
    flag = flag.strip().lower()
    if flag not in ("labeled", "unlabeled"):
        raise DataError(f"line {lineno}: supervision flag must be 'labeled' or 'unlabeled', got {flag!r}")
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    try:
        rec = UtteranceRecord(str(p), speaker, flag == "labeled", _ints(phonemes), _ints(durations), lineno)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from exc
    if rec.labeled and (rec.phonemes is None or rec.durations is None):
        raise DataError(f"line {lineno}: labeled record needs phonemes and durations")
    if rec.phonemes is not None and rec.durations is not None and len(rec.phonemes) != len(rec.durations):
        raise DataError(
            f"line {lineno}: {len(rec.phonemes)} phonemes but {len(rec.durations)} durations"
        )
    return rec


def read_manifest(path) -> list[UtteranceRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip() and not line.startswith("#"):
                records.append(parse_manifest_line(line, path.parent, lineno))
    return records


def format_record(rec: UtteranceRecord, base: Optional[Path] = None) -> str:
    path = rec.path
    if base is not None:
        try:
            path = os.path.relpath(rec.path, base)
        except ValueError:
            pass
    ints = lambda xs: "" if xs is None else " ".join(map(str, xs))
    return "\t".join([path, rec.speaker, "labeled" if rec.labeled else "unlabeled",
                      ints(rec.phonemes), ints(rec.durations)])


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    path = Path(path)
    lines = [format_record(r, path.parent) for r in records]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def record_problems(rec: UtteranceRecord, mel_frames: int, vocab_size: Optional[int] = None) -> list[str]:
    """Invariant violations of one record against its audio's frame count."""
    problems = []
    if rec.durations is not None and any(d < 0 for d in rec.durations):
        problems.append("negative duration")
    if rec.labeled and rec.durations is not None:
        total = sum(rec.durations)
        if abs(total - mel_frames) > 1:
            problems.append(f"sum(durations)={total} but audio has {mel_frames} mel frames")
    if vocab_size is not None and rec.phonemes:
        bad = [p for p in rec.phonemes if not 0 <= p < vocab_size]
        if bad:
            problems.append(f"phoneme IDs outside vocabulary: {bad}")
    return problems


def read_vocab(path) -> list[str]:
    """One symbol per line; the ID of a symbol is its 0-based line index."""
    symbols = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    symbols = [s for s in symbols if s]
    if len(set(symbols)) != len(symbols):
        raise DataError(f"{path}: duplicate symbols in vocabulary")
    return symbols


def write_vocab(path, symbols: list[str]) -> None:
    Path(path).write_text("\n".join(symbols) + "\n", encoding="utf-8")


def symbols_to_ids(symbols: Iterable[str], vocab: list[str]) -> list[int]:
    index = {s: i for i, s in enumerate(vocab)}
    missing = [s for s in symbols if s not in index]
    if missing:
        raise DataError(f"phoneme(s) not in vocabulary: {' '.join(missing)}")
    return [index[s] for s in symbols]


class FeatureStore:
    """Waveforms and log-mels by path, memoized and optionally cached on disk."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig(), cache_dir=None):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._wave: dict[str, np.ndarray] = {}
        self._mel: dict[str, np.ndarray] = {}
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def waveform(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._wave:
            self._wave[key] = load_wav(path, self.cfg.sample_rate).samples
        return self._wave[key]

    def cache_key(self, path) -> str:
        st = os.stat(path)
        blob = json.dumps([os.path.abspath(path), st.st_size, st.st_mtime_ns, repr(self.cfg)])
        return hashlib.sha1(blob.encode()).hexdigest()

    def mel(self, path) -> np.ndarray:
        key = str(path)
        if key in self._mel:
            return self._mel[key]
        cached = self.cache_dir / f"{self.cache_key(path)}.npy" if self.cache_dir else None
        if cached is not None and cached.exists():
            mel = np.load(cached)
        else:
            mel = wav_to_mel(Waveform(self.waveform(path), self.cfg.sample_rate), self.cfg)
            if cached is not None:
                tmp = cached.with_name(cached.stem + ".tmp.npy")
                np.save(tmp, mel)
                os.replace(tmp, cached)
        self._mel[key] = mel
        return mel
