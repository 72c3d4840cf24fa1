"""Variational prompt encoder: a fixed-length mel window -> Gaussian posterior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class PromptConfig:
    n_mels: int = 40
    embed_dim: int = 64
    crop_frames: int = 300
    conv_channels: list[int] = field(default_factory=lambda: [32, 32, 64, 64, 128, 256])
    se_reduction: int = 8
    feature_dim: int = 128
    logvar_clamp: float = 10.0


@dataclass
class KLAnnealing:
    """Reconstruction-only warm start, then a linear ramp of the KL weight."""

    warm_start: int = 5000
    ramp_len: int = 20000
    w_max: float = 1e-2


def kl_weight(step: int, schedule: KLAnnealing) -> float:
    if step < schedule.warm_start:
        return 0.0
    if schedule.ramp_len <= 0:
        return schedule.w_max
    frac = min(1.0, (step - schedule.warm_start) / schedule.ramp_len)
    return schedule.w_max * frac


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    var = sigma ** 2
    return 0.5 * (mu ** 2 + var - 1.0 - torch.log(var)).sum(-1)


def kl_loss(mu: torch.Tensor, sigma: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinged KL: max(0, KL - margin) per embedding, averaged over the batch."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return torch.clamp(kl_divergence(mu, sigma) - margin, min=0.0).mean()


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    phi = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * phi


def repeat_pad(mel, frames: int):
    """Tile a short (T, F) mel along time until it has at least ``frames`` rows."""
    n = mel.shape[0]
    if n == 0:
        raise ValueError("cannot pad an empty mel")
    if n >= frames:
        return mel
    reps = -(-frames // n)
    if isinstance(mel, torch.Tensor):
        return mel.repeat(reps, 1)[:frames]
    return np.tile(mel, (reps, 1))[:frames]


def crop_prompt(mel, generator: torch.Generator, frames: int = 300):
    """Uniformly placed contiguous ``frames``-long window of a (T, F) mel."""
    mel = repeat_pad(mel, frames)
    n_start = mel.shape[0] - frames + 1
    start = int(torch.randint(0, n_start, (1,), generator=generator))
    return mel[start:start + frames]


class SEResBlock(nn.Module):
    """Residual 2-D conv block whose residual branch is gated per channel."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Linear(channels, hidden)
        self.excite = nn.Linear(hidden, channels)

    def residual(self, x):
        return self.conv2(F.relu(self.conv1(x)))

    def gate(self, r):
        z = r.mean(dim=(2, 3))
        return torch.sigmoid(self.excite(F.relu(self.squeeze(z))))

    def forward(self, x):
        r = self.residual(x)
        return F.relu(x + r * self.gate(r)[:, :, None, None])


class PromptEncoder(nn.Module):
    """(B, crop_frames, n_mels) window -> (mu, sigma), each (B, embed_dim)."""

    def __init__(self, config: PromptConfig | None = None):
        super().__init__()
        self.config = config = config or PromptConfig()
        convs, c_in = [], 1
        for c in config.conv_channels:
            convs.append(nn.Conv2d(c_in, c, 3, stride=(1, 2), padding=1))
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.se_block = SEResBlock(c_in, config.se_reduction)
        self.feature = nn.Linear(c_in, config.feature_dim)
        self.mu = nn.Linear(config.feature_dim, config.embed_dim)
        self.logvar = nn.Linear(config.feature_dim, config.embed_dim)

    def features(self, window: torch.Tensor) -> torch.Tensor:
        if window.ndim != 3 or tuple(window.shape[1:]) != (self.config.crop_frames, self.config.n_mels):
            raise ValueError(
                f"expected (batch, {self.config.crop_frames}, {self.config.n_mels}) window, "
                f"got {tuple(window.shape)}"
            )
        h = window.unsqueeze(1)
        for conv in self.convs:
            h = F.relu(conv(h))
        return self.se_block(h)

    def forward(self, window: torch.Tensor):
        h = self.features(window).mean(dim=(2, 3))
        h = F.relu(self.feature(h))
        c = self.config.logvar_clamp
        logvar = torch.clamp(self.logvar(h), -c, c)
        return self.mu(h), torch.exp(0.5 * logvar)

    def embed(self, window: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Posterior mean, or a reparameterized draw when ``generator`` is given."""
        mu, sigma = self(window)
        return mu if generator is None else reparameterize(mu, sigma, generator)
