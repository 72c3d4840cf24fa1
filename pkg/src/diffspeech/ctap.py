"""Contrastive token-acoustic pretraining.

A speech encoder (mel frames) and a phoneme encoder (phoneme IDs expanded
to frame rate) map into one layer-normalized d-dimensional space. Frames
are pulled together with a symmetric frame-level InfoNCE loss, and a single
decoder reconstructs the mel from either representation plus a prompt
embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import masked_mse
from .denoiser import PositionalEncoding
from .length_regulator import expand_batch
from .prompt_encoder import PromptConfig, PromptEncoder


@dataclass
class CTAPConfig:
    vocab_size: int = 100
    n_mels: int = 40
    d: int = 512
    phoneme_dim: int = 256
    speech_layers: int = 6
    phoneme_layers: int = 4
    heads: int = 8
    ff_dim: int = 2048
    dropout: float = 0.0
    decoder_hidden: int = 256
    decoder_layers: int = 3
    decoder_kernel: int = 5
    temperature_init: float = 0.07
    temperature_min: float = 1e-3
    temperature_max: float = 1.0
    positional: bool = True
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CTAPConfig":
        d = dict(d)
        d["prompt"] = PromptConfig(**d.get("prompt", {}))
        return cls(**d)


def _transformer(cfg: CTAPConfig, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(cfg.d, cfg.heads, dim_feedforward=cfg.ff_dim,
                                       dropout=cfg.dropout, batch_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


def _masked(h: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    return h if mask is None else h * mask.unsqueeze(-1).to(h.dtype)


class SpeechEncoder(nn.Module):
    """conv -> conv -> GELU -> transformer x N -> linear -> LayerNorm."""

    def __init__(self, cfg: CTAPConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.d, 3, padding=1)
        self.conv2 = nn.Conv1d(cfg.d, cfg.d, 3, padding=1)
        self.pos = PositionalEncoding(cfg.d) if cfg.positional else None
        self.transformer = _transformer(cfg, cfg.speech_layers)
        self.out = nn.Linear(cfg.d, cfg.d)
        self.norm = nn.LayerNorm(cfg.d, elementwise_affine=False)

    def forward(self, mel: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = _masked(mel, mask).transpose(1, 2)
        h = _masked(self.conv1(h).transpose(1, 2), mask).transpose(1, 2)
        h = F.gelu(self.conv2(h)).transpose(1, 2)
        if self.pos is not None:
            h = self.pos(h)
        h = self.transformer(h, src_key_padding_mask=None if mask is None else ~mask)
        return _masked(self.norm(self.out(h)), mask)


class PhonemeEncoder(nn.Module):
    """ID lookup -> conv -> ReLU -> transformer x N -> linear -> LayerNorm.

    Operates on already-expanded (frame-rate) IDs; ``CTAP.encode_phonemes``
    does the expansion.
    """

    def __init__(self, cfg: CTAPConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.phoneme_dim)
        self.conv = nn.Conv1d(cfg.phoneme_dim, cfg.d, 3, padding=1)
        self.pos = PositionalEncoding(cfg.d) if cfg.positional else None
        self.transformer = _transformer(cfg, cfg.phoneme_layers)
        self.out = nn.Linear(cfg.d, cfg.d)
        self.norm = nn.LayerNorm(cfg.d, elementwise_affine=False)

    def forward(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        check_ids(ids, self.vocab_size, mask)
        h = _masked(self.embedding(ids.clamp(0, self.vocab_size - 1)), mask)
        h = F.relu(self.conv(h.transpose(1, 2))).transpose(1, 2)
        if self.pos is not None:
            h = self.pos(h)
        h = self.transformer(h, src_key_padding_mask=None if mask is None else ~mask)
        return _masked(self.norm(self.out(h)), mask)


def check_ids(ids: torch.Tensor, vocab_size: int, mask: Optional[torch.Tensor] = None):
    valid = ids if mask is None else ids[mask]
    if valid.numel() and (valid.min() < 0 or valid.max() >= vocab_size):
        raise ValueError(
            f"phoneme ID out of range [0, {vocab_size}): min={int(valid.min())}, max={int(valid.max())}"
        )


class MelDecoder(nn.Module):
    """Joint-space frames + prompt embedding -> mel frames."""

    def __init__(self, cfg: CTAPConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.d, cfg.decoder_hidden)
        self.prompt = nn.Linear(cfg.prompt.embed_dim, cfg.decoder_hidden)
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.decoder_hidden, cfg.decoder_hidden, cfg.decoder_kernel,
                      padding=cfg.decoder_kernel // 2)
            for _ in range(cfg.decoder_layers)
        )
        self.out = nn.Linear(cfg.decoder_hidden, cfg.n_mels)

    def forward(self, r: torch.Tensor, g: torch.Tensor, mask: Optional[torch.Tensor] = None):
        h = _masked(self.inp(r) + self.prompt(g).unsqueeze(1), mask).transpose(1, 2)
        m = None if mask is None else mask.unsqueeze(1).to(h.dtype)
        for conv in self.convs:
            h = h + F.relu(conv(h))
            if m is not None:
                h = h * m
        return _masked(self.out(h.transpose(1, 2)), mask)


def contrastive_loss(S: torch.Tensor, P: torch.Tensor, mask: Optional[torch.Tensor],
                     temperature) -> torch.Tensor:
    """Symmetric frame-level InfoNCE over all valid frames of the batch.

    The positive for frame (b, tau) of one modality is (b, tau) of the other;
    every other valid frame in the batch is a negative.
    """
    if S.shape != P.shape:
        raise ValueError(f"S shape {tuple(S.shape)} != P shape {tuple(P.shape)}")
    if mask is None:
        mask = torch.ones(S.shape[:2], dtype=torch.bool, device=S.device)
    s, p = S[mask], P[mask]
    if s.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 valid frames")
    logits = F.normalize(s, dim=-1) @ F.normalize(p, dim=-1).T / temperature
    target = torch.arange(s.shape[0], device=S.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class CTAPBatch:
    """Padded paired batch. ``durations`` (B, K) must sum to each utterance's frame count."""

    mel: torch.Tensor            # (B, T_s, n_mels), normalized
    mel_mask: torch.Tensor       # (B, T_s)
    phonemes: torch.Tensor       # (B, K) int64
    durations: torch.Tensor      # (B, K) int64, zero on padding
    prompt: torch.Tensor         # (B, crop_frames, n_mels)


class CTAP(nn.Module):
    def __init__(self, config: CTAPConfig | None = None):
        super().__init__()
        self.config = config = config or CTAPConfig()
        self.speech_encoder = SpeechEncoder(config)
        self.phoneme_encoder = PhonemeEncoder(config)
        self.decoder = MelDecoder(config)
        self.prompt_encoder = PromptEncoder(config.prompt)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(config.temperature_init)))

    @property
    def temperature(self) -> torch.Tensor:
        c = self.config
        return self.log_temperature.exp().clamp(c.temperature_min, c.temperature_max)

    def encode_speech(self, mel: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.speech_encoder(mel, mask)

    def encode_phonemes(self, ids: torch.Tensor, durations: Optional[torch.Tensor] = None,
                        lengths=None):
        """Expand IDs by ``durations`` and encode them.

        ids: (B, K). Returns (P, mask) where P is (B, sum(durations), d).
        Without ``durations`` the IDs are encoded at phoneme rate.
        """
        check_ids(ids, self.config.vocab_size)
        if durations is None:
            mask = torch.ones(ids.shape, dtype=torch.bool, device=ids.device)
            if lengths is not None:
                mask = torch.arange(ids.shape[1], device=ids.device)[None] < torch.as_tensor(lengths)[:, None]
            return self.phoneme_encoder(ids, mask), mask
        if durations.shape != ids.shape:
            raise ValueError(f"durations shape {tuple(durations.shape)} != ids shape {tuple(ids.shape)}")
        frame_ids, mask = expand_batch(ids.unsqueeze(-1), durations, lengths)
        return self.phoneme_encoder(frame_ids.squeeze(-1), mask), mask

    def decode_to_mel(self, r: torch.Tensor, g: torch.Tensor, mask: Optional[torch.Tensor] = None):
        return self.decoder(r, g, mask)

    def losses(self, batch: CTAPBatch, g: torch.Tensor) -> dict:
        """Loss terms for one batch; ``total`` = contrastive + mse_speech + mse_phoneme."""
        S = self.encode_speech(batch.mel, batch.mel_mask)
        P, p_mask = self.encode_phonemes(batch.phonemes, batch.durations)
        if P.shape[1] != S.shape[1] or not torch.equal(p_mask, batch.mel_mask):
            raise ValueError("expanded phoneme lengths do not match mel lengths")
        con = contrastive_loss(S, P, batch.mel_mask, self.temperature)
        mse_s = masked_mse(self.decode_to_mel(S, g, batch.mel_mask), batch.mel, batch.mel_mask)
        mse_p = masked_mse(self.decode_to_mel(P, g, batch.mel_mask), batch.mel, batch.mel_mask)
        return {"contrastive": con, "mse_speech": mse_s, "mse_phoneme": mse_p,
                "total": con + mse_s + mse_p, "S": S, "P": P}


def ctap_total_loss(model: CTAP, batch: CTAPBatch, g: torch.Tensor) -> torch.Tensor:
    return model.losses(batch, g)["total"]


@torch.no_grad()
def retrieval_accuracy(S: torch.Tensor, P: torch.Tensor, mask: Optional[torch.Tensor] = None) -> float:
    """Fraction of valid speech frames whose most cosine-similar phoneme frame is their own."""
    if mask is None:
        mask = torch.ones(S.shape[:2], dtype=torch.bool, device=S.device)
    s, p = F.normalize(S[mask], dim=-1), F.normalize(P[mask], dim=-1)
    hits = (s @ p.T).argmax(dim=1) == torch.arange(s.shape[0], device=s.device)
    return hits.double().mean().item()


@torch.no_grad()
def pair_separation(S: torch.Tensor, P: torch.Tensor, mask: Optional[torch.Tensor] = None):
    """(mean cosine of matched frames, mean cosine of mismatched frames)."""
    if mask is None:
        mask = torch.ones(S.shape[:2], dtype=torch.bool, device=S.device)
    sim = F.normalize(S[mask], dim=-1) @ F.normalize(P[mask], dim=-1).T
    n = sim.shape[0]
    matched = sim.diagonal().mean().item()
    mismatched = ((sim.sum() - sim.diagonal().sum()) / (n * n - n)).item()
    return matched, mismatched
