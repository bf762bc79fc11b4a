"""Latent semantic maps from cross-attention, refined by self-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import UsageError
from .numerics import resize_bilinear, row_normalize


@dataclass(frozen=True)
class TokenGrouping:
    """Prompt token positions naming each concept (concept ``i`` is ``groups[i-1]``)."""

    groups: tuple[frozenset[int], ...]
    n_tokens: int

    def __init__(self, groups: Sequence[Sequence[int]], n_tokens: int):
        gs = tuple(frozenset(int(x) for x in g) for g in groups)
        seen: set[int] = set()
        for i, g in enumerate(gs, start=1):
            if not g:
                raise UsageError(f"concept {i} has no tokens")
            if any(not 0 <= x < n_tokens for x in g):
                raise UsageError(f"concept {i} token index out of range 0..{n_tokens - 1}")
            if seen & g:
                raise UsageError(f"concept {i} shares tokens with another concept")
            seen |= g
        object.__setattr__(self, "groups", gs)
        object.__setattr__(self, "n_tokens", int(n_tokens))

    @property
    def n_concepts(self) -> int:
        return len(self.groups)

    def label_of_token(self, width: Optional[int] = None) -> torch.Tensor:
        """Lookup table token position -> label (0 for background tokens)."""
        lut = torch.zeros(max(width or 0, self.n_tokens), dtype=torch.long)
        for i, g in enumerate(self.groups, start=1):
            lut[sorted(g)] = i
        return lut


@dataclass
class SemanticMap:
    labels: torch.Tensor  # (h, w) long, values in 0..n_concepts
    n_concepts: int

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.labels.shape)

    def flat(self) -> torch.Tensor:
        return self.labels.flatten()

    def counts(self) -> list[int]:
        return [int((self.labels == i).sum()) for i in range(self.n_concepts + 1)]


def _as_grid(m: torch.Tensor) -> torch.Tensor:
    if m.dim() == 3:
        return m
    if m.dim() != 2:
        raise UsageError("cross-attention map must be (hw, K) or (h, w, K)")
    side = math.isqrt(m.shape[0])
    if side * side != m.shape[0]:
        raise UsageError(f"cannot infer a square grid from {m.shape[0]} positions")
    return m.reshape(side, side, m.shape[1])


def aggregate_cross(maps: Sequence[torch.Tensor], target: tuple[int, int]) -> torch.Tensor:
    """Upsample every map to ``target``, average, renormalise rows. Returns (H*W, K)."""
    if not maps:
        raise UsageError("aggregate_cross needs at least one map")
    grids = [_as_grid(m) for m in maps]
    K = grids[0].shape[-1]
    if any(g.shape[-1] != K for g in grids):
        raise UsageError("maps disagree on token count")
    up = [resize_bilinear(g.permute(2, 0, 1), target) for g in grids]  # (K, H, W) each
    mean = torch.stack(up).mean(dim=0)
    return row_normalize(mean.permute(1, 2, 0).reshape(-1, K))


def refine_with_self_attention(S: Sequence[torch.Tensor], C: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Per layer ``S @ C``: propagate token evidence along patch affinities."""
    if len(S) != len(C):
        raise UsageError(f"{len(S)} self-attention maps but {len(C)} cross-attention maps")
    out = []
    for s, c in zip(S, C):
        if s.dim() != 2 or s.shape[0] != s.shape[1] or s.shape[1] != c.shape[0]:
            raise UsageError(f"shape mismatch S{tuple(s.shape)} C{tuple(c.shape)}")
        out.append(s @ c)
    return out


def segment_latent(C_hat: torch.Tensor, grouping: TokenGrouping,
                   resolution: Optional[tuple[int, int]] = None) -> SemanticMap:
    """Argmax over tokens, keep concept tokens, merge every other token into label 0.

    Ties go to the lowest token index.
    """
    if C_hat.dim() != 2:
        raise UsageError("C_hat must be (positions, tokens)")
    if (C_hat < 0).any():
        raise UsageError("C_hat must be nonnegative")
    if C_hat.shape[1] < grouping.n_tokens:
        raise UsageError(f"map has {C_hat.shape[1]} tokens, grouping expects {grouping.n_tokens}")
    if resolution is None:
        side = math.isqrt(C_hat.shape[0])
        resolution = (side, C_hat.shape[0] // max(side, 1))
    if resolution[0] * resolution[1] != C_hat.shape[0]:
        raise UsageError(f"resolution {resolution} does not match {C_hat.shape[0]} positions")
    winner = torch.argmax(C_hat, dim=1)  # first maximal index on ties
    labels = grouping.label_of_token(C_hat.shape[1])[winner]
    return SemanticMap(labels.reshape(resolution), grouping.n_concepts)


def downsample_labels(smap: SemanticMap, size: tuple[int, int]) -> SemanticMap:
    """Majority label over each block of fine cells; ties go to the lowest label."""
    h, w = smap.resolution
    H, W = size
    if (H, W) == (h, w):
        return SemanticMap(smap.labels.clone(), smap.n_concepts)
    if h % H or w % W:
        raise UsageError(f"cannot pool {h}x{w} labels onto {H}x{W}")
    fh, fw = h // H, w // W
    blocks = smap.labels.reshape(H, fh, W, fw).permute(0, 2, 1, 3).reshape(H, W, fh * fw)
    counts = torch.stack([(blocks == i).sum(-1) for i in range(smap.n_concepts + 1)], dim=-1)
    return SemanticMap(torch.argmax(counts, dim=-1), smap.n_concepts)


def latent_semantic_map(record, grouping: TokenGrouping, target: tuple[int, int],
                        blocks: Optional[Sequence[int]] = None, refine: bool = True,
                        previous: Optional[torch.Tensor] = None, ema: Optional[float] = None):
    """Semantic map for one step from a model's attention record.

    Returns ``(SemanticMap, aggregated_map)``; the aggregated map can be fed
    back as ``previous`` when ``ema`` smoothing is enabled.
    """
    blocks = list(blocks) if blocks is not None else record.blocks()
    C = [record[b].cross_map[0] for b in blocks]
    if refine:
        C = refine_with_self_attention([record[b].self_map[0] for b in blocks], C)
    grids = [c.reshape(*record[b].resolution, -1) for b, c in zip(blocks, C)]
    agg = aggregate_cross(grids, target)
    if ema is not None and previous is not None:
        agg = ema * previous + (1.0 - ema) * agg
    return segment_latent(agg, grouping, target), agg
