"""Noise schedule, closed-form forward noising, deterministic DDIM, CFG.

Timestep convention: ``t`` runs over ``0..T``. Index 0 is the clean signal,
so ``alpha_bar[0] == 1`` and ``beta[0] == 0``; the physical schedule lives in
indices ``1..T``. A sampler visits a decreasing subsequence of ``T..1`` and its
last update lands on ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import UsageError
from .numerics import DTYPE


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor  # (T+1,), beta[0] = 0
    alpha: torch.Tensor  # 1 - beta
    alpha_bar: torch.Tensor  # cumulative product, alpha_bar[0] = 1

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise UsageError(f"timestep {t} outside 0..{self.T}")
        return t


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` (t=1) to ``beta_max`` (t=T)."""
    if T < 1:
        raise UsageError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise UsageError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        ramp = torch.tensor([beta_min], dtype=DTYPE)
    else:
        ramp = torch.linspace(beta_min, beta_max, T, dtype=DTYPE)
    beta = torch.cat([torch.zeros(1, dtype=DTYPE), ramp])
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def sampling_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps ``[t_1 > t_2 > ... > t_steps]``, t_1 = T.

    The step after ``t_steps`` is always 0.
    """
    if not 1 <= steps <= sched.T:
        raise UsageError(f"steps must be in 1..{sched.T}, got {steps}")
    return [(sched.T * k) // steps for k in range(steps, 0, -1)]


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise UsageError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    t = sched.check_t(t)
    if t == 0:
        return z0.clone()
    ab = sched.alpha_bar[t].to(z0.dtype)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_x0(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar[sched.check_t(t)].to(z_t.dtype)
    return (z_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()


def ddim_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    t, t_prev = sched.check_t(t), sched.check_t(t_prev)
    if t_prev > t:
        raise UsageError(f"t_prev={t_prev} must not exceed t={t}")
    if z_t.shape != eps_pred.shape:
        raise UsageError("latent and noise prediction shapes differ")
    if t_prev == t:
        return z_t.clone()
    x0 = predict_x0(z_t, eps_pred, t, sched)
    if t_prev == 0:
        return x0
    ab_prev = sched.alpha_bar[t_prev].to(z_t.dtype)
    return ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps_pred


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """``eps_u + scale * (eps_c - eps_u)``.

    Evaluated as ``eps_c + (scale - 1) * (eps_c - eps_u)`` so scale 1 and equal
    branches return ``eps_c`` bit-exactly.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise UsageError("guidance branches have different shapes")
    return eps_cond + (scale - 1.0) * (eps_cond - eps_uncond)
