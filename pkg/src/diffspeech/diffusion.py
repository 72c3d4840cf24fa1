"""Conditional DDPM training objective and ancestral sampler.

Both functions work against any denoiser callable with the signature
``denoiser(x_t, t, p, s, mask=None, s_mask=None) -> eps_hat`` where ``t`` is a
(B,) integer tensor of 1-indexed steps. All randomness comes from the
``torch.Generator`` passed in; the denoiser itself must be deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .schedules import NoiseSchedule, forward_sample, reverse_step

Denoiser = Callable[..., torch.Tensor]


@dataclass
class DiffusionBatch:
    """x0 is (B, L, C). ``mask`` (B, L) marks valid frames of x0.

    ``s`` is the conditioning sequence (B, L_s, C_s) with its own optional
    mask ``s_mask``; L_s may differ from L when the denoiser upsamples.
    """

    x0: torch.Tensor
    s: Optional[torch.Tensor] = None
    p: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None
    s_mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.x0.ndim != 3:
            raise ValueError(f"x0 must be (batch, length, channels), got {tuple(self.x0.shape)}")
        if self.mask is None:
            self.mask = torch.ones(self.x0.shape[:2], dtype=torch.bool, device=self.x0.device)
        if tuple(self.mask.shape) != tuple(self.x0.shape[:2]):
            raise ValueError(
                f"mask shape {tuple(self.mask.shape)} does not match x0 frames {tuple(self.x0.shape[:2])}"
            )
        self.mask = self.mask.bool()


def _randn(shape, generator, like):
    return torch.randn(shape, generator=generator, dtype=like.dtype, device=like.device)


def masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of (a - b)^2 over valid frames and all channels."""
    w = mask.to(a.dtype).unsqueeze(-1)
    n = w.sum() * a.shape[-1]
    if n == 0:
        raise ValueError("mask selects no frames")
    return ((a - b) ** 2 * w).sum() / n


def training_loss(batch: DiffusionBatch, denoiser: Denoiser, schedule: NoiseSchedule,
                  generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction loss with a step drawn independently per item.

    Draw order from ``generator``: steps t (B,), then eps (shape of x0).
    """
    x0 = batch.x0
    if not batch.mask.any():
        raise ValueError("mask selects no frames")
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator, device=x0.device)
    eps = _randn(x0.shape, generator, x0)
    x_t = forward_sample(x0, t, eps, schedule)
    eps_hat = denoiser(x_t, t, batch.p, batch.s, mask=batch.mask, s_mask=batch.s_mask)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"denoiser returned {tuple(eps_hat.shape)}, expected {tuple(eps.shape)}")
    return masked_mse(eps, eps_hat, batch.mask)


@torch.no_grad()
def sample(shape, s, p, denoiser: Denoiser, schedule: NoiseSchedule, generator: torch.Generator,
           mask=None, s_mask=None, dtype=torch.float32, device=None) -> torch.Tensor:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0.

    Draw order: x_T, then one psi per step for t = T..2.
    """
    like = torch.empty(0, dtype=dtype, device=device)
    x = _randn(tuple(shape), generator, like)
    if mask is not None:
        x = x * mask.unsqueeze(-1).to(dtype)
    for t in range(schedule.T, 0, -1):
        steps = torch.full((shape[0],), t, dtype=torch.long, device=x.device)
        eps_hat = denoiser(x, steps, p, s, mask=mask, s_mask=s_mask)
        psi = _randn(x.shape, generator, x) if t > 1 else torch.zeros_like(x)
        x = reverse_step(x, eps_hat, t, schedule, psi)
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(dtype)
    return x
