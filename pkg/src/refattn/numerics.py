"""Deterministic numeric kernels shared by every other module.

Tensors are ``torch.Tensor`` objects; the attention math runs in float64.
Random streams come from numpy's counter-based Philox generator so a draw
depends only on (seed, stream key, position), never on evaluation order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import DegenerateRowError, NumericError, UsageError

DTYPE = torch.float64


class Rng:
    """Seeded, counter-based random stream.

    ``child(*keys)`` derives an independent stream from the same seed, which is
    how callers hand out reproducible sub-streams (one per concept, per epoch,
    ...) without sharing mutable state.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise UsageError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(keys))

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


def gaussian(rng: Rng, shape: Sequence[int], dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Standard normal samples of ``shape`` drawn from ``rng``."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise UsageError(f"invalid shape {shape}")
    return torch.from_numpy(rng.numpy.standard_normal(shape)).to(dtype)


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise UsageError(f"axis {axis} invalid for tensor of rank {x.dim()}")
    return axis % x.dim()


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along ``axis``.

    Entries equal to ``-inf`` are allowed (they get zero mass) as long as every
    slice has at least one finite entry.
    """
    axis = _check_axis(logits, axis)
    shifted = logits - logits.amax(dim=axis, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def row_normalize(m: torch.Tensor) -> torch.Tensor:
    """Divide each row (last axis) by its sum."""
    if (m < 0).any():
        raise UsageError("row_normalize expects nonnegative entries")
    s = m.sum(dim=-1, keepdim=True)
    if (s == 0).any():
        bad = torch.nonzero(s.squeeze(-1) == 0)[0].tolist()
        raise DegenerateRowError("all-zero row cannot be normalized", row=bad)
    return m / s


def _source_coords(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # half-pixel centres (align_corners=False), clamped at the borders
    scale = n_in / n_out
    src = (torch.arange(n_out, dtype=DTYPE) + 0.5) * scale - 0.5
    src = src.clamp(min=0.0, max=n_in - 1)
    lo = src.floor().long()
    hi = (lo + 1).clamp(max=n_in - 1)
    frac = src - lo.to(DTYPE)
    return lo, hi, frac


def resize_bilinear(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of the trailing two axes to ``size`` (H, W).

    Uses half-pixel centres. Interpolation is written as ``lerp`` so constant
    inputs stay exactly constant and outputs never leave [min, max].
    """
    if m.dim() < 2:
        raise UsageError("resize_bilinear needs at least 2 dimensions")
    h, w = m.shape[-2:]
    H, W = int(size[0]), int(size[1])
    if min(h, w, H, W) < 1:
        raise UsageError(f"extents must be >= 1, got {(h, w)} -> {(H, W)}")
    if (h, w) == (H, W):
        return m.clone()
    lo, hi, f = _source_coords(h, H)
    f = f.to(m.dtype).view(-1, 1)
    rows = torch.lerp(m[..., lo, :], m[..., hi, :], f)
    lo, hi, f = _source_coords(w, W)
    return torch.lerp(rows[..., lo], rows[..., hi], f.to(m.dtype))


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")
    return x
