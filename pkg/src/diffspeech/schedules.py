"""Linear noise schedules and closed-form DDPM transitions.

Steps are 1-indexed everywhere in the public interface: ``t`` runs from 1
to ``T``. Schedule arrays are stored 0-indexed at double precision, and
``alpha_bar(0)`` is defined as 1 so the variance of the final reverse step
vanishes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    """Invalid schedule configuration."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step t={t} outside 1..{self.T}")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        """Reverse-step standard deviation; zero at t=1."""
        self._check(t)
        ab, ab_prev = self.alpha_bar(t), self.alpha_bar(t - 1)
        return math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - self.alpha(t)))


def make_linear_schedule(beta_min: float, beta_max: float, T: int) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _coef(values: np.ndarray, t, like):
    """Gather per-item coefficients for ``t`` and shape them to broadcast over ``like``."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t) - 1])
    if isinstance(like, torch.Tensor):
        idx = torch.as_tensor(t, device="cpu").long() - 1
        c = torch.from_numpy(np.array(values))[idx].to(device=like.device, dtype=like.dtype)
    else:
        c = np.asarray(values)[np.asarray(t) - 1]
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim))


def _check_steps(t, schedule: NoiseSchedule):
    ts = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if ts.size and (ts.min() < 1 or ts.max() > schedule.T):
        raise ScheduleError(f"steps must lie in 1..{schedule.T}")


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """Draw x_t from q(x_t | x_0) given the noise ``eps``.

    ``t`` is either one step for the whole array or one step per item along
    the leading axis. Works on numpy arrays and torch tensors alike.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    _check_steps(t, schedule)
    ab = _coef(schedule.alpha_bars, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    sqrt = torch.sqrt if isinstance(ab, torch.Tensor) else np.sqrt
    return sqrt(ab) * x0 + sqrt(1.0 - ab) * eps


def reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, psi):
    """One ancestral step x_t -> x_{t-1}.

    The caller supplies ``psi`` (standard normal for t > 1, zeros at t = 1).
    """
    if not (tuple(x_t.shape) == tuple(eps_hat.shape) == tuple(psi.shape)):
        raise ValueError(
            f"shape mismatch: x_t {tuple(x_t.shape)}, eps_hat {tuple(eps_hat.shape)}, "
            f"psi {tuple(psi.shape)}"
        )
    a, ab = schedule.alpha(t), schedule.alpha_bar(t)
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    return mean + schedule.sigma(t) * psi
