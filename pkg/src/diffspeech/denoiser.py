"""Residual dilated-convolution noise predictor shared by all diffusion stages.

Layout per residual layer (WaveNet-style gated unit):

    y = x + W_step(step_emb) + W_prompt(p)          # broadcast over length
    h = dilated_conv(y) + W_cond(c)                 # conditioning as a bias
    z = tanh(h_a) * sigmoid(h_b)
    res, skip = split(W_out(z))
    x <- (x + res) / sqrt(2)

Skips from every layer are summed, scaled by 1/sqrt(N) and projected to the
data channels. Convolutions are non-causal (symmetric padding).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .length_regulator import expand


class ConditioningAlignmentError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    out_channels: int
    cond_dim: int
    n_layers: int = 30
    n_blocks: int = 3
    channels: int = 64
    kernel: int = 3
    step_embed_dim: int = 128
    step_hidden: int = 512
    prompt_dim: Optional[int] = None
    cond_encoder_layers: int = 2
    cond_encoder_dim: int = 512
    cond_encoder_heads: int = 4
    upsample: int = 1
    zero_init_output: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.n_blocks < 1 or self.n_layers % self.n_blocks:
            raise ConfigError(
                f"n_layers={self.n_layers} must be a positive multiple of n_blocks={self.n_blocks}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.upsample < 1:
            raise ConfigError(f"upsample must be >= 1, got {self.upsample}")

    @property
    def layers_per_block(self) -> int:
        return self.n_layers // self.n_blocks

    @property
    def dilations(self) -> list[int]:
        n = self.layers_per_block
        return [2 ** (i % n) for i in range(self.n_layers)]

    def to_dict(self) -> dict:
        return asdict(self)


def receptive_field(config: DenoiserConfig) -> int:
    """Number of input frames that can influence one output frame."""
    return 1 + (config.kernel - 1) * sum(config.dilations)


def conditioning_radius(config: DenoiserConfig) -> int:
    """Max distance (in output frames) a change of the conditioning can travel.

    Conditioning enters after each layer's dilated conv, so the first layer's
    conv does not spread it. Holds only without a conditioning transformer.
    """
    return (config.kernel - 1) // 2 * sum(config.dilations[1:])


def sinusoidal_code(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = t.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class StepEmbedding(nn.Module):
    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.proj1 = nn.Linear(embed_dim, hidden)
        self.proj2 = nn.Linear(hidden, hidden)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = sinusoidal_code(t, self.embed_dim).to(self.proj1.weight.dtype)
        x = F.silu(self.proj1(x))
        return F.silu(self.proj2(x))


class PositionalEncoding(nn.Module):
    """Fixed sinusoidal positions, added to (B, L, D) inputs."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(x.shape[1], device=x.device)
        return x + sinusoidal_code(pos, self.dim).to(x.dtype)[None, :, : x.shape[-1]]


class ConditionEncoder(nn.Module):
    """Project the conditioning sequence and run a small transformer over it."""

    def __init__(self, cond_dim: int, dim: int, layers: int, heads: int):
        super().__init__()
        self.layers = layers
        if layers == 0:
            self.proj = nn.Identity()
            self.out_dim = cond_dim
            return
        self.proj = nn.Linear(cond_dim, dim)
        self.pos = PositionalEncoding(dim)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.out_dim = dim

    def forward(self, s: torch.Tensor, s_mask: Optional[torch.Tensor]) -> torch.Tensor:
        if self.layers == 0:
            return s
        h = self.pos(self.proj(s))
        pad = None if s_mask is None else ~s_mask
        h = self.encoder(h, src_key_padding_mask=pad)
        if s_mask is not None:
            h = h * s_mask.unsqueeze(-1).to(h.dtype)
        return h


class ResidualLayer(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int, step_hidden: int,
                 cond_dim: int, prompt_dim: Optional[int]):
        super().__init__()
        self.dilated_conv = nn.Conv1d(channels, 2 * channels, kernel,
                                      padding=dilation * (kernel - 1) // 2, dilation=dilation)
        self.step_proj = nn.Linear(step_hidden, channels)
        self.prompt_proj = nn.Linear(prompt_dim, channels) if prompt_dim else None
        self.cond_proj = nn.Conv1d(cond_dim, 2 * channels, 1)
        self.out_proj = nn.Conv1d(channels, 2 * channels, 1)

    def forward(self, x, step, prompt, cond, mask):
        # x: (B, C, L); step: (B, H); cond: (B, Cc, L); mask: (B, 1, L)
        y = x + self.step_proj(step).unsqueeze(-1)
        if self.prompt_proj is not None:
            y = y + self.prompt_proj(prompt).unsqueeze(-1)
        h = self.dilated_conv(y * mask) + self.cond_proj(cond)
        gate, filt = h.chunk(2, dim=1)
        z = torch.sigmoid(gate) * torch.tanh(filt)
        res, skip = self.out_proj(z).chunk(2, dim=1)
        return (x + res) / math.sqrt(2.0) * mask, skip * mask


class Denoiser(nn.Module):
    """eps-predictor mapping (x_t, t, p, s) to a tensor shaped like x_t.

    x_t: (B, L, out_channels); t: (B,) steps; p: (B, prompt_dim) or None;
    s: (B, L_s, cond_dim) with L_s * upsample == L, unless per-item
    ``durations`` are given to expand s to L.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.input_proj = nn.Conv1d(config.out_channels, c, 1)
        self.step_embedding = StepEmbedding(config.step_embed_dim, config.step_hidden)
        self.cond_encoder = ConditionEncoder(config.cond_dim, config.cond_encoder_dim,
                                             config.cond_encoder_layers, config.cond_encoder_heads)
        self.layers = nn.ModuleList(
            ResidualLayer(c, config.kernel, d, config.step_hidden, self.cond_encoder.out_dim,
                          config.prompt_dim)
            for d in config.dilations
        )
        self.skip_proj = nn.Conv1d(c, c, 1)
        self.output_proj = nn.Conv1d(c, config.out_channels, 1)
        if config.zero_init_output:
            nn.init.zeros_(self.output_proj.weight)
            nn.init.zeros_(self.output_proj.bias)

    def align(self, h: torch.Tensor, length: int, durations=None) -> torch.Tensor:
        """Upsample the encoded conditioning (B, L_s, C) to ``length`` frames."""
        if durations is not None:
            rows = [expand(h[b], durations[b]) for b in range(h.shape[0])]
            bad = [r.shape[0] for r in rows if r.shape[0] != length]
            if bad:
                raise ConditioningAlignmentError(
                    f"durations expand conditioning to {bad[0]} frames, data has {length}"
                )
            return torch.stack(rows)
        factor = self.config.upsample
        if h.shape[1] * factor != length:
            raise ConditioningAlignmentError(
                f"conditioning length {h.shape[1]} x upsample {factor} = {h.shape[1] * factor} "
                f"does not match data length {length}"
            )
        return h if factor == 1 else torch.repeat_interleave(h, factor, dim=1)

    def forward(self, x_t, t, p=None, s=None, mask=None, s_mask=None, durations=None):
        B, L, _ = x_t.shape
        if s is None:
            raise ConditioningAlignmentError("conditioning sequence s is required")
        if p is not None and self.config.prompt_dim is None:
            raise ValueError("this model takes no prompt embedding")
        if p is None and self.config.prompt_dim is not None:
            raise ValueError("this model requires a prompt embedding")
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.bool, device=x_t.device)
        m = mask.unsqueeze(1).to(x_t.dtype)
        if s_mask is not None:
            s = s * s_mask.unsqueeze(-1).to(s.dtype)
        cond = self.align(self.cond_encoder(s, s_mask), L, durations).transpose(1, 2) * m

        x = self.input_proj(x_t.transpose(1, 2) * m) * m
        step = self.step_embedding(t)
        skip_sum = 0.0
        for layer in self.layers:
            x, skip = layer(x, step, p, cond, m)
            skip_sum = skip_sum + skip
        h = self.skip_proj(skip_sum / math.sqrt(len(self.layers)))
        return (self.output_proj(h) * m).transpose(1, 2)


MODEL_KINDS = ("acoustic", "semantic", "duration", "wave")


def default_config(kind: str, *, semantic_dim: int = 512, n_mels: int = 40, prompt_dim: int = 64,
                   hop: int = 240) -> DenoiserConfig:
    """Stage defaults: data channels, conditioning and prompt wiring per model kind."""
    if kind == "acoustic":
        return DenoiserConfig(out_channels=n_mels, cond_dim=semantic_dim, prompt_dim=prompt_dim)
    if kind == "semantic":
        return DenoiserConfig(out_channels=semantic_dim, cond_dim=semantic_dim)
    if kind == "duration":
        return DenoiserConfig(out_channels=1, cond_dim=semantic_dim, n_layers=8, n_blocks=2)
    if kind == "wave":
        return DenoiserConfig(out_channels=1, cond_dim=n_mels, prompt_dim=prompt_dim, upsample=hop)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def instantiate_for(kind: str, **overrides) -> Denoiser:
    """Denoiser wired for one stage; the prompt input exists only for acoustic and wave."""
    dims = {k: overrides.pop(k) for k in ("semantic_dim", "n_mels", "hop") if k in overrides}
    prompt_dim = overrides.pop("prompt_dim", None)
    if prompt_dim and kind in ("acoustic", "wave"):
        dims["prompt_dim"] = prompt_dim
    config = default_config(kind, **dims)
    unknown = set(overrides) - set(config.to_dict())
    if unknown:
        raise ConfigError(f"unknown denoiser option(s): {sorted(unknown)}")
    return Denoiser(replace(config, **overrides))
