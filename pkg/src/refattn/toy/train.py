"""Epsilon-prediction MSE training for the toy U-Net.

An optional attention-alignment term asks every cross-attention layer to put
its mass on the prompt tokens that describe each pixel (``background`` for
background pixels, the colour and shape words for a shape's pixels). Large
text-to-image models develop that localization on their own; this tiny model
does not, and both segmentation and region-aware injection rely on it.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Optional

import numpy as np
import torch

from ..diffusion import NoiseSchedule
from ..errors import TrainingError, UsageError
from ..numerics import Rng
from .shapes import ShapesDataset
from .unet import AttnRecord, ToyUNet

log = logging.getLogger(__name__)


def noised_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar[t].to(x0.dtype)[:, None, None, None]
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def denoising_loss(model: ToyUNet, x0, tokens, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    pred = model(noised_batch(x0, t, eps, sched), t, tokens)
    return torch.mean((pred - eps) ** 2)


def alignment_loss(record: AttnRecord, coverage: torch.Tensor, weight: torch.Tensor,
                   self_weight: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between pixel coverage and attention mass per region.

    ``coverage`` is (B, 1 + J, S, S) with channel 0 the background; shape j owns
    prompt positions 2j + 1 (colour) and 2j + 2 (kind). Cross-attention mass is
    summed over each region's tokens, self-attention mass over each region's
    pixels. ``weight`` (B,) scales each image's term; dropped prompts get
    weight 0 (their cross term only; self-attention sees the same layout).
    """
    J = coverage.shape[1] - 1
    total = coverage.new_zeros(())
    for b in record.blocks():
        P = record[b].cross_map  # (B, n, K)
        H, W = record[b].resolution
        cov = torch.nn.functional.adaptive_avg_pool2d(coverage, (H, W)).flatten(2).transpose(1, 2)
        groups = [P[..., 0]] + [P[..., 2 * j + 1] + P[..., 2 * j + 2] for j in range(J)]
        cross = torch.stack(groups, dim=-1)  # (B, n, 1 + J)
        own = record[b].self_map @ cov  # (B, n, 1 + J)
        for mass, w in ((cross, weight), (own, self_weight)):
            ce = -(cov * torch.log(mass + 1e-8)).sum(-1).mean(-1)
            total = total + (w * ce).sum() / w.sum().clamp(min=1e-12)
    return total / max(2 * len(record.blocks()), 1)


def train_toy(model: ToyUNet, data: ShapesDataset, sched: NoiseSchedule, epochs: int, rng: Rng,
              batch_size: int = 32, lr: float = 2e-3, p_uncond: float = 0.1, attn_weight: float = 0.0,
              on_epoch: Optional[Callable[[dict], None]] = None) -> ToyUNet:
    """Train in place and return ``model``.

    ``attn_weight`` scales the attention-alignment term (0 disables it); it is
    further weighted by ``alpha_bar_t`` since noisy inputs carry no layout.
    Per-epoch mean losses are appended to ``model.train_log``. Every random
    choice (batch order, timesteps, noise, prompt dropout) comes from child
    streams of ``rng`` keyed by (epoch, batch), so runs are seed-reproducible.
    """
    if len(data) == 0:
        raise UsageError("cannot train on an empty dataset")
    if attn_weight < 0:
        raise UsageError("attn_weight must be >= 0")
    if epochs < 0:
        raise UsageError("epochs must be >= 0")
    model.train_log = getattr(model, "train_log", [])
    if epochs == 0:
        return model

    dtype = model.dtype
    x_all, tok_all = data.as_tensors(model.config.max_tokens, dtype=dtype)
    n = len(data)
    max_shapes = (model.config.max_tokens - 1) // 2
    cov_all = data.coverage(max_shapes, dtype=dtype) if attn_weight > 0 else None
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))

    model.train()
    step = 0
    for epoch in range(epochs):
        order = rng.child(epoch).numpy.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * batch_size:(b + 1) * batch_size])
            r = rng.child(epoch, b + 1).numpy
            B = len(idx)
            x0, tok = x_all[idx], tok_all[idx].clone()
            t = torch.from_numpy(r.integers(1, sched.T + 1, size=B))
            eps = torch.from_numpy(r.standard_normal((B, *x0.shape[1:]))).to(dtype)
            drop = torch.from_numpy(r.uniform(size=B) < p_uncond)
            tok[drop] = 0
            if cov_all is None:
                loss = denoising_loss(model, x0, tok, t, eps, sched)
            else:
                record = AttnRecord(keep_grad=True)
                pred = model(noised_batch(x0, t, eps, sched), t, tok, record=record)
                ab = sched.alpha_bar[t].to(dtype)
                align = alignment_loss(record, cov_all[idx], ab * (~drop).to(dtype), ab)
                loss = torch.mean((pred - eps) ** 2) + attn_weight * align
            if not torch.isfinite(loss):
                raise TrainingError("training loss became non-finite", epoch=epoch, step=step,
                                    last_loss=losses[-1] if losses else float("nan"))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched_lr.step()
            losses.append(loss.item())
            step += 1
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "steps": step}
        model.train_log.append(entry)
        log.info("epoch=%d loss=%.6f", epoch, entry["loss"])
        if on_epoch is not None:
            on_epoch(entry)
    model.eval()
    return model
