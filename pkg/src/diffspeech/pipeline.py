"""Training drivers for the three stages and the composed synthesizer.

Stage map:
    ctap  -- contrastive pretraining on labeled pairs (+ prompt encoder)
    t2s   -- duration diffusion and semantic diffusion, labeled pairs only
    s2s   -- acoustic diffusion (+ prompt encoder) and wave diffusion, audio only

CTAP encoders are frozen after pretraining. The speech-only stage wraps its
records with ``speech_only`` before touching them, so phoneme and duration
fields are never read there.
"""
from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .ctap import CTAP, CTAPBatch, CTAPConfig, retrieval_accuracy
from .data import DataError, FeatureStore, speech_only
from .denoiser import Denoiser, DenoiserConfig, instantiate_for
from .diffusion import DiffusionBatch, sample, training_loss
from .features import NormStats, Waveform, load_wav, wav_to_mel
from .length_regulator import expand
from .prompt_encoder import PromptEncoder, crop_prompt, kl_loss, kl_weight, reparameterize
from .schedules import NoiseSchedule, make_linear_schedule

log = logging.getLogger(__name__)

STAGE_KINDS = ("ctap", "duration", "semantic", "acoustic", "wave")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- checkpoints

@dataclass
class StageCheckpoint:
    """Self-describing stage state: rebuilding the model needs nothing else."""

    kind: str
    model_config: dict
    state: dict
    step: int = 0
    schedule: Optional[dict] = None
    norm_stats: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    optimizer: Optional[dict] = None
    generator_state: Optional[torch.Tensor] = None

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.__dict__, tmp)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "StageCheckpoint":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))

    def noise_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(**self.schedule)

    def stats(self) -> NormStats:
        return NormStats.from_dict(self.norm_stats)


def expect_kind(ckpt: StageCheckpoint, kind: str) -> StageCheckpoint:
    if ckpt.kind != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, got {ckpt.kind!r}")
    return ckpt


def load_ctap(ckpt: StageCheckpoint) -> CTAP:
    expect_kind(ckpt, "ctap")
    model = CTAP(CTAPConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.state["model"])
    return model


def load_denoiser(ckpt: StageCheckpoint) -> Denoiser:
    model = Denoiser(DenoiserConfig(**ckpt.model_config))
    model.load_state_dict(ckpt.state["model"])
    return model


def load_prompt_encoder(ckpt: StageCheckpoint) -> PromptEncoder:
    expect_kind(ckpt, "acoustic")
    ctap_cfg = CTAPConfig.from_dict(ckpt.extra["ctap_config"])
    pe = PromptEncoder(ctap_cfg.prompt)
    pe.load_state_dict(ckpt.state["prompt_encoder"])
    return pe


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    module.requires_grad_(False)
    return module


# ---------------------------------------------------------------- builders

def build_ctap(config: ExperimentConfig) -> CTAP:
    c = config.ctap
    cfg = CTAPConfig(vocab_size=config.vocab_size, n_mels=config.features.n_mels, d=c.d,
                     phoneme_dim=c.phoneme_dim, speech_layers=c.speech_layers,
                     phoneme_layers=c.phoneme_layers, heads=c.heads, ff_dim=c.ff_dim,
                     dropout=c.dropout, decoder_hidden=c.decoder_hidden,
                     decoder_layers=c.decoder_layers, temperature_init=c.temperature_init,
                     prompt=config.prompt_config())
    return CTAP(cfg)


def build_denoiser(kind: str, config: ExperimentConfig) -> Denoiser:
    section = getattr(config.denoisers, kind)
    return instantiate_for(kind, semantic_dim=config.ctap.d, n_mels=config.features.n_mels,
                           hop=config.features.hop, prompt_dim=config.prompt.embed_dim,
                           **section.overrides())


def schedule_for(kind: str, config: ExperimentConfig) -> dict:
    s = config.schedule
    return {"beta_min": s.beta_min, "beta_max": s.beta_max, "T": s.steps(kind)}


def _seeded(seed: int, fn):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return fn()


# ---------------------------------------------------------------- batching

def pad_stack(seqs: Sequence[torch.Tensor]):
    """List of (L_i, C) tensors -> (B, L_max, C) zero-padded, plus (B, L_max) mask."""
    n = max(s.shape[0] for s in seqs)
    out = seqs[0].new_zeros((len(seqs), n) + tuple(seqs[0].shape[1:]))
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def choose_batch(n: int, batch_size: int, generator: torch.Generator) -> list[int]:
    if n <= batch_size:
        return list(range(n))
    return torch.randperm(n, generator=generator)[:batch_size].sort().values.tolist()


def random_start(length: int, segment: int, generator: torch.Generator) -> int:
    if length <= segment:
        return 0
    return int(torch.randint(0, length - segment + 1, (1,), generator=generator))


def fit_length(mel: np.ndarray, frames: int) -> np.ndarray:
    """Trim or edge-pad a (T, F) mel to exactly ``frames`` rows."""
    if mel.shape[0] >= frames:
        return mel[:frames]
    return np.concatenate([mel, np.repeat(mel[-1:], frames - mel.shape[0], axis=0)])


def _tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)
    optimizer: Optional[dict] = None
    generator_state: Optional[torch.Tensor] = None

    @classmethod
    def from_checkpoint(cls, ckpt: Optional[StageCheckpoint]) -> "TrainState":
        if ckpt is None:
            return cls()
        return cls(ckpt.step, list(ckpt.history), ckpt.optimizer, ckpt.generator_state)


def run_training(params, loss_fn: Callable[[int], torch.Tensor], n_steps: int,
                 config: ExperimentConfig, generator: torch.Generator, state: TrainState,
                 checkpoint_fn: Optional[Callable[[TrainState], None]] = None,
                 name: str = "") -> TrainState:
    """Adam loop from ``state.step`` to ``n_steps``; mutates and returns ``state``."""
    torch.set_flush_denormal(True)
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.train.lr)
    if state.optimizer is not None:
        opt.load_state_dict(state.optimizer)
    if state.generator_state is not None:
        generator.set_state(state.generator_state)
    every = config.train.checkpoint_every
    for step in range(state.step, n_steps):
        loss = loss_fn(step)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"{name}: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.train.grad_clip)
        opt.step()
        state.history.append(loss.item())
        state.step = step + 1
        state.optimizer = None
        if step % 100 == 0:
            log.info("%s step %d loss %.4f", name, step, state.history[-1])
        if checkpoint_fn is not None and every and state.step % every == 0 and state.step < n_steps:
            state.optimizer = copy.deepcopy(opt.state_dict())
            state.generator_state = generator.get_state()
            checkpoint_fn(state)
    state.optimizer = opt.state_dict()
    state.generator_state = generator.get_state()
    return state


# ---------------------------------------------------------------- CTAP stage

@dataclass
class LabeledItem:
    mel: torch.Tensor          # (T_s, n_mels) normalized, T_s == sum(durations)
    phonemes: torch.Tensor     # (K,)
    durations: torch.Tensor    # (K,)
    speaker: str = ""


def labeled_items(records, store: FeatureStore, stats: NormStats) -> list[LabeledItem]:
    items = []
    for rec in records:
        if not rec.labeled:
            continue
        if rec.phonemes is None or rec.durations is None:
            raise DataError(f"{rec.path}: labeled record without phonemes/durations")
        mel = store.mel(rec.path)
        total = int(sum(rec.durations))
        if abs(mel.shape[0] - total) > 1:
            raise DataError(f"{rec.path}: sum(durations)={total} but {mel.shape[0]} mel frames")
        items.append(LabeledItem(_tensor(stats.normalize(fit_length(mel, total))),
                                 torch.tensor(rec.phonemes, dtype=torch.long),
                                 torch.tensor(rec.durations, dtype=torch.long), rec.speaker))
    if not items:
        raise DataError("no labeled records")
    return items


def prompt_windows(mels: Sequence[torch.Tensor], frames: int, generator: torch.Generator):
    return torch.stack([crop_prompt(m, generator, frames) for m in mels])


def ctap_batch(items: Sequence[LabeledItem], frames: int, generator: torch.Generator,
               crop: int = 0) -> CTAPBatch:
    mels, ids, durs = [], [], []
    for it in items:
        mel, ph, du = it.mel, it.phonemes, it.durations
        if crop and mel.shape[0] > crop:
            start = random_start(mel.shape[0], crop, generator)
            mel = mel[start:start + crop]
            ph = expand(ph, du)[start:start + crop]
            du = torch.ones_like(ph)
        mels.append(mel)
        ids.append(ph)
        durs.append(du)
    mel, mask = pad_stack(mels)
    ph, _ = pad_stack([i.unsqueeze(-1) for i in ids])
    du, _ = pad_stack([d.unsqueeze(-1) for d in durs])
    prompt = prompt_windows([it.mel for it in items], frames, generator)
    return CTAPBatch(mel, mask, ph.squeeze(-1), du.squeeze(-1), prompt)


def ctap_step_losses(model: CTAP, batch: CTAPBatch, config: ExperimentConfig, step: int,
                     generator: torch.Generator) -> dict:
    mu, sigma = model.prompt_encoder(batch.prompt)
    if config.prompt.train_in_ctap:
        g = reparameterize(mu, sigma, generator)
    else:
        g = mu.detach()
    out = model.losses(batch, g)
    w = kl_weight(step, config.prompt.kl) if config.prompt.train_in_ctap else 0.0
    out["kl"] = kl_loss(mu, sigma, config.prompt.kl_margin)
    out["objective"] = out["total"] + w * out["kl"]
    return out


def train_ctap(records, store: FeatureStore, config: ExperimentConfig,
               stats: Optional[NormStats] = None, resume: Optional[StageCheckpoint] = None,
               checkpoint_fn: Optional[Callable[[StageCheckpoint], None]] = None) -> StageCheckpoint:
    """Contrastive pretraining on the labeled subset of ``records``."""
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise DataError("CTAP training needs labeled records; none found")
    if stats is None:
        stats = NormStats.from_mels([store.mel(r.path) for r in records])
    items = labeled_items(labeled, store, stats)
    model = _seeded(config.train.seed, lambda: build_ctap(config))
    if resume is not None:
        model.load_state_dict(expect_kind(resume, "ctap").state["model"])
    model.train()
    gen = torch.Generator().manual_seed(config.train.seed + 1)
    frames = config.prompt_frames

    def loss_fn(step):
        chosen = [items[i] for i in choose_batch(len(items), config.train.batch_size, gen)]
        batch = ctap_batch(chosen, frames, gen, config.train.ctap_crop_frames)
        return ctap_step_losses(model, batch, config, step, gen)["objective"]

    def make(state):
        return StageCheckpoint("ctap", model.config.to_dict(), {"model": copy.deepcopy(model.state_dict())},
                               state.step, norm_stats=stats.to_dict(), history=list(state.history),
                               optimizer=state.optimizer, generator_state=state.generator_state)

    state = run_training(model.parameters(), loss_fn, config.train.ctap_steps, config, gen,
                         TrainState.from_checkpoint(resume),
                         None if checkpoint_fn is None else lambda s: checkpoint_fn(make(s)), "ctap")
    model.eval()
    ckpt = make(state)
    ckpt.extra["retrieval"] = ctap_retrieval(model, items, frames)
    return ckpt


@torch.no_grad()
def ctap_retrieval(model: CTAP, items: Sequence[LabeledItem], frames: int) -> float:
    mel, mask = pad_stack([it.mel for it in items])
    ph, _ = pad_stack([it.phonemes.unsqueeze(-1) for it in items])
    du, _ = pad_stack([it.durations.unsqueeze(-1) for it in items])
    S = model.encode_speech(mel, mask)
    P, _ = model.encode_phonemes(ph.squeeze(-1), du.squeeze(-1))
    return retrieval_accuracy(S, P, mask)


# ---------------------------------------------------------------- text-to-semantic stage

@dataclass
class DurationStats:
    """Standardization of log(1 + frames) durations."""

    mean: float
    std: float

    def encode(self, durations: torch.Tensor) -> torch.Tensor:
        return (torch.log1p(durations.double()) - self.mean) / self.std

    def decode(self, x: torch.Tensor, scale: float = 1.0, min_frames: int = 1) -> torch.Tensor:
        frames = torch.expm1(x.double() * self.std + self.mean) * scale
        return torch.clamp(torch.round(frames), min=min_frames).long()

    @classmethod
    def fit(cls, durations: Sequence[torch.Tensor], min_std: float = 0.1) -> "DurationStats":
        logs = torch.log1p(torch.cat(durations).double())
        std = float(logs.std(unbiased=False)) if logs.numel() > 1 else 0.0
        return cls(float(logs.mean()), max(std, min_std))


@torch.no_grad()
def phoneme_context(ctap: CTAP, phonemes: torch.Tensor) -> torch.Tensor:
    """Frozen phoneme encoder at phoneme rate: (K,) -> (K, d). Conditions the duration model."""
    P, _ = ctap.encode_phonemes(phonemes.unsqueeze(0))
    return P[0]


@torch.no_grad()
def semantic_pair(ctap: CTAP, item: LabeledItem):
    """(S target, P conditioning), both (T_s, d), from the frozen encoders."""
    S = ctap.encode_speech(item.mel.unsqueeze(0))[0]
    P, _ = ctap.encode_phonemes(item.phonemes.unsqueeze(0), item.durations.unsqueeze(0))
    return S, P[0]


def _denoiser_checkpoint(kind, model, config, state, stats, extra=None) -> StageCheckpoint:
    return StageCheckpoint(kind, model.config.to_dict(), {"model": copy.deepcopy(model.state_dict())},
                           state.step, schedule=schedule_for(kind, config), norm_stats=stats,
                           extra=dict(extra or {}), history=list(state.history),
                           optimizer=state.optimizer, generator_state=state.generator_state)


def train_duration(records, store: FeatureStore, config: ExperimentConfig, ctap_ckpt: StageCheckpoint,
                   resume: Optional[StageCheckpoint] = None, checkpoint_fn=None) -> StageCheckpoint:
    ctap = freeze(load_ctap(ctap_ckpt))
    items = labeled_items([r for r in records if r.labeled], store, ctap_ckpt.stats())
    dstats = DurationStats.fit([it.durations for it in items])
    contexts = [phoneme_context(ctap, it.phonemes) for it in items]
    targets = [dstats.encode(it.durations).float().unsqueeze(-1) for it in items]
    model = _seeded(config.train.seed + 10, lambda: build_denoiser("duration", config))
    if resume is not None:
        model.load_state_dict(expect_kind(resume, "duration").state["model"])
    schedule = make_linear_schedule(**schedule_for("duration", config))
    gen = torch.Generator().manual_seed(config.train.seed + 11)

    def loss_fn(step):
        idx = choose_batch(len(items), config.train.batch_size, gen)
        x0, mask = pad_stack([targets[i] for i in idx])
        s, _ = pad_stack([contexts[i] for i in idx])
        return training_loss(DiffusionBatch(x0, s, None, mask, mask), model, schedule, gen)

    extra = {"duration_stats": {"mean": dstats.mean, "std": dstats.std}}
    make = lambda st: _denoiser_checkpoint("duration", model, config, st, ctap_ckpt.norm_stats, extra)
    state = run_training(model.parameters(), loss_fn, config.train.duration_steps, config, gen,
                         TrainState.from_checkpoint(resume),
                         None if checkpoint_fn is None else lambda s: checkpoint_fn(make(s)), "duration")
    return make(state)


def train_semantic(records, store: FeatureStore, config: ExperimentConfig, ctap_ckpt: StageCheckpoint,
                   resume: Optional[StageCheckpoint] = None, checkpoint_fn=None) -> StageCheckpoint:
    ctap = freeze(load_ctap(ctap_ckpt))
    items = labeled_items([r for r in records if r.labeled], store, ctap_ckpt.stats())
    pairs = [semantic_pair(ctap, it) for it in items]
    model = _seeded(config.train.seed + 20, lambda: build_denoiser("semantic", config))
    if resume is not None:
        model.load_state_dict(expect_kind(resume, "semantic").state["model"])
    schedule = make_linear_schedule(**schedule_for("semantic", config))
    gen = torch.Generator().manual_seed(config.train.seed + 21)
    seg = config.train.acoustic_crop_frames

    def loss_fn(step):
        xs, cs = [], []
        for i in choose_batch(len(pairs), config.train.batch_size, gen):
            S, P = pairs[i]
            start = random_start(S.shape[0], seg, gen)
            xs.append(S[start:start + seg])
            cs.append(P[start:start + seg])
        x0, mask = pad_stack(xs)
        c, _ = pad_stack(cs)
        return training_loss(DiffusionBatch(x0, c, None, mask, mask), model, schedule, gen)

    make = lambda st: _denoiser_checkpoint("semantic", model, config, st, ctap_ckpt.norm_stats)
    state = run_training(model.parameters(), loss_fn, config.train.semantic_steps, config, gen,
                         TrainState.from_checkpoint(resume),
                         None if checkpoint_fn is None else lambda s: checkpoint_fn(make(s)), "semantic")
    return make(state)


def train_text_to_semantic(records, store: FeatureStore, config: ExperimentConfig,
                           ctap_ckpt: StageCheckpoint, resume: Optional[dict] = None,
                           checkpoint_fn=None) -> dict:
    """Duration and semantic diffusion on labeled pairs. Returns {"duration": ..., "semantic": ...}."""
    resume = resume or {}
    cb = (lambda kind: None if checkpoint_fn is None else (lambda ck: checkpoint_fn(kind, ck)))
    return {
        "duration": train_duration(records, store, config, ctap_ckpt, resume.get("duration"), cb("duration")),
        "semantic": train_semantic(records, store, config, ctap_ckpt, resume.get("semantic"), cb("semantic")),
    }


# ---------------------------------------------------------------- semantic-to-speech stage

@dataclass
class AudioItem:
    mel: torch.Tensor      # (T, n_mels) normalized
    wave: torch.Tensor     # (T * hop,) zero-padded waveform
    n_samples: int
    semantic: torch.Tensor  # (T, d) frozen speech-encoder output
    speaker: str = ""


def audio_items(records, store: FeatureStore, stats: NormStats, ctap: CTAP, hop: int) -> list[AudioItem]:
    items = []
    for rec in records:
        mel = _tensor(stats.normalize(store.mel(rec.path)))
        wav = store.waveform(rec.path)
        padded = np.zeros(mel.shape[0] * hop)
        n = min(len(wav), len(padded))
        padded[:n] = wav[:n]
        with torch.no_grad():
            S = ctap.encode_speech(mel.unsqueeze(0))[0]
        items.append(AudioItem(mel, _tensor(padded), n, S, rec.speaker))
    return items


def train_acoustic(views, items: list[AudioItem], config: ExperimentConfig, ctap_ckpt: StageCheckpoint,
                   resume: Optional[StageCheckpoint] = None, checkpoint_fn=None) -> StageCheckpoint:
    seg = config.train.acoustic_crop_frames
    usable = []
    for view, it in zip(views, items):
        if it.mel.shape[0] < seg:
            log.warning("skipping %s for acoustic training: %d frames < segment %d",
                        view.path, it.mel.shape[0], seg)
        else:
            usable.append(it)
    if not usable:
        raise DataError("no utterance is long enough for an acoustic training segment")
    ctap = load_ctap(ctap_ckpt)
    if config.prompt.finetune_in_s2s or config.prompt.train_in_ctap:
        prompt_encoder = copy.deepcopy(ctap.prompt_encoder)
    else:
        prompt_encoder = _seeded(config.train.seed + 31, lambda: PromptEncoder(ctap.config.prompt))
    model = _seeded(config.train.seed + 30, lambda: build_denoiser("acoustic", config))
    if resume is not None:
        expect_kind(resume, "acoustic")
        model.load_state_dict(resume.state["model"])
        prompt_encoder.load_state_dict(resume.state["prompt_encoder"])
    tune_prompt = config.prompt.finetune_in_s2s or not config.prompt.train_in_ctap
    prompt_encoder.requires_grad_(tune_prompt)
    schedule = make_linear_schedule(**schedule_for("acoustic", config))
    gen = torch.Generator().manual_seed(config.train.seed + 32)
    frames = config.prompt_frames

    def loss_fn(step):
        chosen = [usable[i] for i in choose_batch(len(usable), config.train.batch_size, gen)]
        xs, cs = [], []
        for it in chosen:
            start = random_start(it.mel.shape[0], seg, gen)
            xs.append(it.mel[start:start + seg])
            cs.append(it.semantic[start:start + seg])
        x0, mask = pad_stack(xs)
        c, _ = pad_stack(cs)
        mu, sigma = prompt_encoder(prompt_windows([it.mel for it in chosen], frames, gen))
        p = reparameterize(mu, sigma, gen)
        loss = training_loss(DiffusionBatch(x0, c, p, mask, mask), model, schedule, gen)
        w = kl_weight(step, config.prompt.kl)
        return loss + w * kl_loss(mu, sigma, config.prompt.kl_margin) if w else loss

    def make(state):
        ck = _denoiser_checkpoint("acoustic", model, config, state, ctap_ckpt.norm_stats,
                                  {"ctap_config": ctap.config.to_dict()})
        ck.state["prompt_encoder"] = copy.deepcopy(prompt_encoder.state_dict())
        return ck

    params = list(model.parameters()) + list(prompt_encoder.parameters())
    state = run_training(params, loss_fn, config.train.acoustic_steps, config, gen,
                         TrainState.from_checkpoint(resume),
                         None if checkpoint_fn is None else lambda s: checkpoint_fn(make(s)), "acoustic")
    return make(state)


def train_wave(views, items: list[AudioItem], config: ExperimentConfig, prompt_encoder: PromptEncoder,
               norm_stats: dict, resume: Optional[StageCheckpoint] = None,
               checkpoint_fn=None) -> StageCheckpoint:
    hop = config.features.hop
    seg_frames = max(1, config.train.wave_crop_samples // hop)
    usable = []
    for view, it in zip(views, items):
        if it.n_samples < seg_frames * hop:
            log.warning("skipping %s for wave training: %d samples < segment %d",
                        view.path, it.n_samples, seg_frames * hop)
        else:
            usable.append(it)
    if not usable:
        raise DataError("no utterance is long enough for a wave training segment")
    prompt_encoder = freeze(copy.deepcopy(prompt_encoder))
    model = _seeded(config.train.seed + 40, lambda: build_denoiser("wave", config))
    if resume is not None:
        model.load_state_dict(expect_kind(resume, "wave").state["model"])
    schedule = make_linear_schedule(**schedule_for("wave", config))
    gen = torch.Generator().manual_seed(config.train.seed + 41)
    frames = config.prompt_frames

    def loss_fn(step):
        chosen = [usable[i] for i in choose_batch(len(usable), config.train.batch_size, gen)]
        xs, xm, cs = [], [], []
        for it in chosen:
            start = random_start(it.n_samples // hop, seg_frames, gen)
            a, b = start * hop, (start + seg_frames) * hop
            xs.append(it.wave[a:b].unsqueeze(-1))
            valid = torch.arange(a, b) < it.n_samples
            xm.append(valid.unsqueeze(-1))
            cs.append(it.mel[start:start + seg_frames])
        x0, _ = pad_stack(xs)
        mask, _ = pad_stack(xm)
        c, c_mask = pad_stack(cs)
        with torch.no_grad():
            p = prompt_encoder(prompt_windows([it.mel for it in chosen], frames, gen))[0]
        return training_loss(DiffusionBatch(x0, c, p, mask.squeeze(-1), c_mask), model, schedule, gen)

    make = lambda st: _denoiser_checkpoint("wave", model, config, st, norm_stats)
    state = run_training(model.parameters(), loss_fn, config.train.wave_steps, config, gen,
                         TrainState.from_checkpoint(resume),
                         None if checkpoint_fn is None else lambda s: checkpoint_fn(make(s)), "wave")
    return make(state)


def train_semantic_to_speech(records, store: FeatureStore, config: ExperimentConfig,
                             ctap_ckpt: StageCheckpoint, resume: Optional[dict] = None,
                             checkpoint_fn=None) -> dict:
    """Acoustic (+ prompt encoder) and wave diffusion from audio alone.

    Returns {"acoustic": ..., "wave": ...}.
    """
    views = [speech_only(r) for r in records]
    if not views:
        raise DataError("no records for semantic-to-speech training")
    resume = resume or {}
    cb = (lambda kind: None if checkpoint_fn is None else (lambda ck: checkpoint_fn(kind, ck)))
    ctap = freeze(load_ctap(ctap_ckpt))
    items = audio_items(views, store, ctap_ckpt.stats(), ctap, config.features.hop)
    acoustic = train_acoustic(views, items, config, ctap_ckpt, resume.get("acoustic"), cb("acoustic"))
    prompt_encoder = load_prompt_encoder(acoustic)
    wave = train_wave(views, items, config, prompt_encoder, ctap_ckpt.norm_stats,
                      resume.get("wave"), cb("wave"))
    return {"acoustic": acoustic, "wave": wave}


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthesisResult:
    waveform: Waveform
    mel: np.ndarray              # (T_s, n_mels) log-mel, denormalized
    mel_normalized: np.ndarray
    durations: np.ndarray
    semantic: np.ndarray         # (T_s, d)
    prompt_embedding: np.ndarray


class Synthesizer:
    """Composes the four diffusion stages around the frozen CTAP encoders."""

    def __init__(self, checkpoints: dict, config: Optional[ExperimentConfig] = None):
        missing = [k for k in STAGE_KINDS if k not in checkpoints]
        if missing:
            raise CheckpointError(f"missing checkpoint(s): {missing}")
        for kind in STAGE_KINDS:
            expect_kind(checkpoints[kind], kind)
        torch.set_flush_denormal(True)
        self.config = config or ExperimentConfig()
        self.ckpts = checkpoints
        self.ctap = freeze(load_ctap(checkpoints["ctap"]))
        self.models = {k: freeze(load_denoiser(checkpoints[k])) for k in STAGE_KINDS[1:]}
        self.schedules = {k: checkpoints[k].noise_schedule() for k in STAGE_KINDS[1:]}
        self.prompt_encoder = freeze(load_prompt_encoder(checkpoints["acoustic"]))
        self.stats = checkpoints["ctap"].stats()
        d = checkpoints["duration"].extra["duration_stats"]
        self.duration_stats = DurationStats(d["mean"], d["std"])
        self.hop = self.models["wave"].config.upsample
        self._check_interfaces()

    def _check_interfaces(self):
        c, m = self.ctap.config, self.models
        problems = []
        if m["semantic"].config.out_channels != c.d or m["semantic"].config.cond_dim != c.d:
            problems.append("semantic model does not match the CTAP dimension")
        if m["acoustic"].config.cond_dim != c.d or m["acoustic"].config.out_channels != c.n_mels:
            problems.append("acoustic model does not match CTAP dimension / mel bands")
        if m["duration"].config.cond_dim != c.d:
            problems.append("duration model does not match the CTAP dimension")
        if m["wave"].config.cond_dim != c.n_mels:
            problems.append("wave model does not match mel bands")
        if problems:
            raise CheckpointError("; ".join(problems))

    @torch.no_grad()
    def predict_durations(self, phonemes, generator: torch.Generator, duration_scale: float = 1.0):
        ids = torch.as_tensor(phonemes, dtype=torch.long)
        ctx = phoneme_context(self.ctap, ids).unsqueeze(0)
        x = sample((1, len(ids), 1), ctx, None, self.models["duration"], self.schedules["duration"],
                   generator)
        return self.duration_stats.decode(x[0, :, 0], duration_scale, self.config.synth.min_duration)

    def resolve_durations(self, phonemes, generator: torch.Generator, duration_scale: float = 1.0,
                          durations=None) -> torch.Tensor:
        """First synthesis stage: sampled durations, or the injected ones unchanged."""
        ids = torch.as_tensor(phonemes, dtype=torch.long)
        if ids.numel() == 0:
            raise ValueError("empty phoneme sequence")
        if durations is None:
            return self.predict_durations(ids, generator, duration_scale)
        durs = torch.as_tensor(durations, dtype=torch.long)
        if durs.shape != ids.shape:
            raise ValueError(f"{len(durs)} durations for {len(ids)} phonemes")
        return durs

    @torch.no_grad()
    def prompt_embedding(self, prompt_mel: np.ndarray, generator: torch.Generator) -> torch.Tensor:
        frames = self.prompt_encoder.config.crop_frames
        window = crop_prompt(_tensor(self.stats.normalize(prompt_mel)), generator, frames)
        mu, sigma = self.prompt_encoder(window.unsqueeze(0))
        if self.config.prompt.sample_at_inference:
            return reparameterize(mu, sigma, generator)
        return mu

    @torch.no_grad()
    def synthesize(self, phonemes, prompt: Waveform, generator: torch.Generator,
                   duration_scale: float = 1.0, durations=None) -> SynthesisResult:
        """Phoneme IDs + prompt speech -> waveform.

        Randomness is drawn in stage order: durations, prompt crop, semantic,
        acoustic, wave. Passing ``durations`` bypasses the duration model.
        """
        ids = torch.as_tensor(phonemes, dtype=torch.long)
        durs = self.resolve_durations(ids, generator, duration_scale, durations)
        prompt_mel = wav_to_mel(prompt)
        g = self.prompt_embedding(prompt_mel, generator)

        P, _ = self.ctap.encode_phonemes(ids.unsqueeze(0), durs.unsqueeze(0))
        T_s = P.shape[1]
        S = sample((1, T_s, self.ctap.config.d), P, None, self.models["semantic"],
                   self.schedules["semantic"], generator)
        mel = sample((1, T_s, self.ctap.config.n_mels), S, g, self.models["acoustic"],
                     self.schedules["acoustic"], generator)
        wave = sample((1, T_s * self.hop, 1), mel, g, self.models["wave"], self.schedules["wave"],
                      generator)
        mel_n = mel[0].double().numpy()
        samples = np.clip(wave[0, :, 0].double().numpy(), -1.0, 1.0)
        return SynthesisResult(Waveform(samples, prompt.rate), self.stats.denormalize(mel_n), mel_n,
                               durs.numpy(), S[0].double().numpy(), g[0].double().numpy())


def synthesize(phonemes, prompt: Waveform, checkpoints: dict, generator: torch.Generator,
               duration_scale: float = 1.0, durations=None) -> SynthesisResult:
    return Synthesizer(checkpoints).synthesize(phonemes, prompt, generator, duration_scale, durations)


def load_checkpoints(directory) -> dict:
    """Read ``<kind>.pt`` for every stage kind present in ``directory``."""
    directory = Path(directory)
    out = {}
    for kind in STAGE_KINDS:
        path = directory / f"{kind}.pt"
        if path.exists():
            out[kind] = StageCheckpoint.load(path)
    return out
