"""Reference-aware self-attention and region-grouped blend attention.

All functions work on single-head 2-D tensors: queries/keys are ``(n, d)``,
values ``(n, d_v)``. Reference concept ``i`` contributes keys/values
``(m_i, d)`` plus a mask-logit row of length ``m_i`` holding ``w_i`` on
concept pixels and 0 elsewhere.

Masking is the literal Hadamard product on the logits: a masked-out reference
logit becomes 0 (so that key still receives ``exp(0)`` weight), and concept
logits are scaled by ``w_i``. The latent's own key block always has
multiplier 1. ``strict=True`` instead sends masked-out logits to ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_diffuse
from .errors import DegenerateMaskError, UsageError
from .numerics import DTYPE, Rng, gaussian, softmax


@dataclass
class ReferenceConcept:
    image: torch.Tensor  # (C, H, W) in the model's [-1, 1] domain
    mask: torch.Tensor  # (H, W), exactly {0, 1}
    tokens: list[int]
    weight: float = 3.0
    name: str = ""

    def __post_init__(self):
        self.mask = torch.as_tensor(self.mask)
        if self.mask.dim() != 2 or tuple(self.mask.shape) != tuple(self.image.shape[-2:]):
            raise UsageError(f"mask shape {tuple(self.mask.shape)} does not match image "
                             f"{tuple(self.image.shape[-2:])}")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise UsageError("reference mask must be binary")
        self.mask = self.mask.to(torch.bool)
        if not self.weight > 0:
            raise UsageError(f"concept weight must be positive, got {self.weight}")


@dataclass
class KVCache:
    """(block, timestep, concept) -> (K, V), written once by the reference path."""

    entries: dict[tuple[int, int, int], tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    layers: tuple[int, ...] = ()
    timesteps: tuple[int, ...] = ()
    n_concepts: int = 0

    def get(self, layer: int, t: int, concept: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.entries[(layer, t, concept)]

    def for_step(self, layer: int, t: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [self.entries[(layer, t, i)] for i in range(self.n_concepts)]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def is_complete(self) -> bool:
        return all((l, t, i) in self.entries for l in self.layers for t in self.timesteps
                   for i in range(self.n_concepts))


def reference_noise(ref: ReferenceConcept, rng: Rng, index: int) -> torch.Tensor:
    """One noise tensor per concept, reused at every timestep."""
    return gaussian(rng.child(index), tuple(ref.image.shape), dtype=ref.image.dtype)


def extract_reference_kv(model, refs: Sequence[ReferenceConcept], sched: NoiseSchedule,
                         timesteps: Sequence[int], layers: Sequence[int], rng: Rng) -> KVCache:
    """Run the vanilla model on noised references and keep K/V at ``layers``."""
    from .toy.unet import denoise

    layers = tuple(sorted(int(l) for l in layers))
    bad = [l for l in layers if l not in model.config.attn_blocks]
    if bad:
        raise UsageError(f"blocks {bad} carry no attention layer", code="E_BLOCKS")
    timesteps = tuple(int(t) for t in timesteps)
    for t in timesteps:
        sched.check_t(t)
    cache = KVCache(layers=layers, timesteps=timesteps, n_concepts=len(refs))
    for i, ref in enumerate(refs):
        eps = reference_noise(ref, rng, i)
        for t in timesteps:
            z = forward_diffuse(ref.image, t, eps, sched)
            _, rec = denoise(model, z, t, ref.tokens)
            for l in layers:
                cache.entries[(l, t, i)] = (rec[l].k[0].clone(), rec[l].v[0].clone())
    return cache


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    # A[j, i]: fraction of output cell j covered by input cell i
    step = n_in / n_out
    A = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = j * step, (j + 1) * step
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            A[j, i] = (min(hi, i + 1) - max(lo, i)) / step
    return A


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-fraction downsampling: output cell is on iff >= half of it is covered."""
    m = np.asarray(mask, dtype=np.float64)
    H, W = size
    cov = _overlap_matrix(m.shape[0], H) @ m @ _overlap_matrix(m.shape[1], W).T
    return torch.from_numpy(cov >= 0.5 - 1e-12)


@dataclass
class MaskLogits:
    """Per attention block: flattened row with ``weight`` on concept cells, 0 elsewhere."""

    rows: dict[int, torch.Tensor]
    weight: float

    def __getitem__(self, layer: int) -> torch.Tensor:
        return self.rows[layer]


def prepare_mask_logits(mask: torch.Tensor, weight: float,
                        resolutions: Mapping[int, tuple[int, int]]) -> MaskLogits:
    mask = torch.as_tensor(mask)
    if not torch.all((mask == 0) | (mask == 1)):
        raise UsageError("mask must be binary")
    if not weight > 0:
        raise UsageError(f"weight must be positive, got {weight}")
    rows = {}
    for layer, (h, w) in sorted(resolutions.items()):
        small = downsample_mask(mask, (h, w))
        if not small.any():
            raise DegenerateMaskError(f"concept mask vanishes at {h}x{w} (block {layer})",
                                      block=layer, resolution=f"{h}x{w}")
        rows[layer] = small.flatten().to(DTYPE) * float(weight)
    return MaskLogits(rows=rows, weight=float(weight))


def self_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, d: int) -> torch.Tensor:
    return softmax(Q @ K.T / math.sqrt(d), axis=-1) @ V


def _masked_logits(Q, K, ref_kv, mask_rows, strict):
    blocks = [Q @ K.T]
    for (Ki, _), row in zip(ref_kv, mask_rows):
        raw = Q @ Ki.T
        scaled = raw * row.to(raw.dtype)[None, :]
        if strict:
            scaled = scaled.masked_fill((row == 0)[None, :], float("-inf"))
        blocks.append(scaled)
    return torch.cat(blocks, dim=1)


def _check_refs(Q, K, V, ref_kv, mask_rows):
    if Q.dim() != 2 or K.dim() != 2 or V.dim() != 2:
        raise UsageError("Q, K, V must be 2-D (positions x features)")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise UsageError(f"incompatible Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    if len(ref_kv) != len(mask_rows):
        raise UsageError(f"{len(ref_kv)} reference K/V pairs but {len(mask_rows)} mask rows")
    for i, ((Ki, Vi), row) in enumerate(zip(ref_kv, mask_rows)):
        if Ki.shape[1] != K.shape[1] or Vi.shape[1] != V.shape[1] or Ki.shape[0] != Vi.shape[0]:
            raise UsageError(f"concept {i}: K{tuple(Ki.shape)} V{tuple(Vi.shape)} do not match the layer")
        if row.numel() != Ki.shape[0]:
            raise UsageError(f"concept {i}: mask row length {row.numel()} != {Ki.shape[0]} keys")


def rsa(Q, K, V, ref_kv: Sequence[tuple[torch.Tensor, torch.Tensor]], mask_logits: Sequence[torch.Tensor],
        d: int, strict: bool = False, return_probs: bool = False):
    """Softmax((M * Q[K, K_1..K_N]^T) / sqrt d) [V, V_1..V_N]."""
    _check_refs(Q, K, V, ref_kv, mask_logits)
    probs = softmax(_masked_logits(Q, K, ref_kv, mask_logits, strict) / math.sqrt(d), axis=-1)
    V_hat = torch.cat([V] + [Vi for _, Vi in ref_kv], dim=0)
    out = probs @ V_hat
    return (out, probs) if return_probs else out


def rba(Q, K, V, ref_kv: Sequence[tuple[torch.Tensor, torch.Tensor]], labels: torch.Tensor,
        mask_logits: Sequence[torch.Tensor], d: int, strict: bool = False) -> torch.Tensor:
    """Region-grouped attention.

    Queries with label 0 attend to the latent's own keys only; queries with
    label ``i > 0`` attend to ``[K, K_i]`` with mask ``[1, w_i M_i]``. Each
    group's output is written back to its original positions.
    """
    _check_refs(Q, K, V, ref_kv, mask_logits)
    labels = torch.as_tensor(labels).flatten().long()
    if labels.numel() != Q.shape[0]:
        raise UsageError(f"semantic map has {labels.numel()} cells, queries have {Q.shape[0]}")
    if labels.numel() and (labels.min() < 0 or labels.max() > len(ref_kv)):
        raise UsageError(f"labels must lie in 0..{len(ref_kv)}", code="E_LABEL")
    out = torch.empty(Q.shape[0], V.shape[1], dtype=torch.result_type(Q, V))
    writes = torch.zeros(Q.shape[0], dtype=torch.long)
    for i in range(len(ref_kv) + 1):
        idx = torch.nonzero(labels == i).flatten()
        if idx.numel() == 0:
            continue
        q = Q[idx]
        if i == 0:
            x = self_attention(q, K, V, d)
        else:
            x = rsa(q, K, V, [ref_kv[i - 1]], [mask_logits[i - 1]], d, strict=strict)
        out[idx] = x
        writes[idx] += 1
    assert bool((writes == 1).all()), "blend must write every position exactly once"
    return out
