"""Dual-path sampling: reference K/V extraction, then RSA -> segmentation + RBA.

The first ``ceil(alpha * steps)`` sampler iterations replace self-attention in
the hooked blocks with RSA over all concepts; the remaining iterations first
derive a latent semantic map from a vanilla conditional pass and then apply
RBA. Injection acts on the conditional branch of classifier-free guidance
unless ``inject_uncond`` is set.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .attention import (KVCache, MaskLogits, ReferenceConcept, extract_reference_kv, prepare_mask_logits,
                        rba, rsa)
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, sampling_timesteps
from .errors import PipelineError, UsageError
from .numerics import Rng, gaussian
from .segmentation import SemanticMap, TokenGrouping, downsample_labels, latent_semantic_map
from .toy.unet import AttnRecord, ToyUNet, denoise, encode_tokens

RSA, RBA = "RSA", "RBA"

DEFAULT_BLOCKS = (5, 6)


@dataclass
class PipelineConfig:
    steps: int = 50
    alpha: float = 0.4
    cfg_scale: float = 7.5
    blocks: tuple[int, ...] = DEFAULT_BLOCKS
    weight: float = 3.0
    weights: Optional[list[float]] = None  # per-concept override of ``weight``
    seed: int = 0
    strict_mask: bool = False
    refine: bool = True  # segment from S @ C (True) or raw C (False)
    inject: bool = True  # False: vanilla sampling, segmentation still reported
    inject_uncond: bool = False
    ema: Optional[float] = None
    record_steps: tuple[int, ...] = ()

    def validate(self, model: Optional[ToyUNet] = None) -> None:
        if self.steps < 1:
            raise UsageError("steps must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise UsageError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.cfg_scale < 0:
            raise UsageError("cfg_scale must be >= 0")
        if not self.blocks:
            raise UsageError("at least one hooked block is required", code="E_BLOCKS")
        if self.ema is not None and not 0 <= self.ema < 1:
            raise UsageError("ema must lie in [0, 1)")
        if model is not None:
            bad = [b for b in self.blocks if b not in model.config.attn_blocks]
            if bad:
                raise UsageError(f"blocks {bad} carry no attention (available: "
                                 f"{model.config.attn_blocks})", code="E_BLOCKS")

    def concept_weights(self, n: int) -> list[float]:
        if self.weights is None:
            return [float(self.weight)] * n
        if len(self.weights) != n:
            raise UsageError(f"{len(self.weights)} weights given for {n} concepts")
        return [float(w) for w in self.weights]


def rsa_step_count(alpha: float, T: int) -> int:
    # tolerance keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up
    return min(T, max(0, math.ceil(alpha * T - 1e-9)))


def stage_for_step(step_index: int, alpha: float, T: int) -> str:
    if not 0 <= step_index < T:
        raise UsageError(f"step index {step_index} outside 0..{T - 1}")
    return RSA if step_index < rsa_step_count(alpha, T) else RBA


@dataclass
class GenerationArtifacts:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    latent: torch.Tensor  # final z_0 in the model domain
    timesteps: list[int]
    stages: list[str]
    semantic_maps: dict[int, SemanticMap] = field(default_factory=dict)
    absent_concepts: list[int] = field(default_factory=list)
    records: dict[int, AttnRecord] = field(default_factory=dict)
    consumed: list[tuple[int, int]] = field(default_factory=list)  # (block, t) injected
    cache: Optional[KVCache] = None
    config: Optional[PipelineConfig] = None

    @property
    def final_map(self) -> Optional[SemanticMap]:
        return self.semantic_maps[max(self.semantic_maps)] if self.semantic_maps else None

    def stage_counts(self) -> dict[str, int]:
        return {RSA: self.stages.count(RSA), RBA: self.stages.count(RBA)}


def _as_float64(model: ToyUNet) -> ToyUNet:
    if model.dtype == torch.float64:
        return model
    m = copy.deepcopy(model).double()
    m.eval()
    return m


def _check_latent(z: torch.Tensor, step: int, t: int) -> None:
    if not torch.isfinite(z).all():
        raise PipelineError("latent became non-finite", step=step, t=t)


def to_image(z0: torch.Tensor) -> np.ndarray:
    return ((z0.clamp(-1, 1) + 1) / 2).permute(1, 2, 0).cpu().numpy()


def sample_plain(model: ToyUNet, prompt_tokens: Sequence[int], config: PipelineConfig,
                 sched: NoiseSchedule) -> GenerationArtifacts:
    """Vanilla DDIM + classifier-free guidance, no attention control."""
    model = _as_float64(model)
    cfg = model.config
    ts = sampling_timesteps(sched, config.steps)
    z = gaussian(Rng(config.seed).child(0), (cfg.in_channels, cfg.image_size, cfg.image_size))
    cond, uncond = encode_tokens(model, prompt_tokens), encode_tokens(model, [])
    for k, t in enumerate(ts):
        eps_c, _ = denoise(model, z, t, cond, record=False)
        eps_u, _ = denoise(model, z, t, uncond, record=False)
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        z = ddim_step(z, cfg_combine(eps_u, eps_c, config.cfg_scale), t, t_prev, sched)
        _check_latent(z, k, t)
    return GenerationArtifacts(image=to_image(z), latent=z, timesteps=ts,
                               stages=[stage_for_step(k, config.alpha, config.steps) for k in range(len(ts))],
                               config=config)


class InjectionHook:
    """Self-attention override for one (timestep, stage) of the customization path."""

    def __init__(self, blocks, cache: KVCache, masks: list[MaskLogits], t: int, stage: str, d: int,
                 strict: bool, labels: Optional[dict[int, torch.Tensor]] = None,
                 consumed: Optional[list] = None):
        self.blocks = set(blocks)
        self.cache, self.masks, self.t, self.stage, self.d = cache, masks, t, stage, d
        self.strict, self.labels, self.consumed = strict, labels, consumed

    def __call__(self, block, q, k, v):
        if block not in self.blocks:
            return None
        ref_kv = self.cache.for_step(block, self.t)
        rows = [m[block] for m in self.masks]
        if self.consumed is not None:
            self.consumed.append((block, self.t))
        outs = []
        for b in range(q.shape[0]):
            if self.stage == RSA:
                outs.append(rsa(q[b], k[b], v[b], ref_kv, rows, self.d, strict=self.strict))
            else:
                outs.append(rba(q[b], k[b], v[b], ref_kv, self.labels[block], rows, self.d,
                                strict=self.strict))
        return torch.stack(outs)


def generate(model: ToyUNet, refs: Sequence[ReferenceConcept], prompt_tokens: Sequence[int],
             grouping: Optional[TokenGrouping], config: PipelineConfig,
             sched: NoiseSchedule) -> GenerationArtifacts:
    config.validate(model)
    refs = list(refs)
    if not refs and (grouping is None or grouping.n_concepts == 0):
        return sample_plain(model, prompt_tokens, config, sched)
    if grouping is None:
        raise UsageError("a token grouping is required when references are given", code="E_GROUPING")
    if refs and grouping.n_concepts != len(refs):
        raise UsageError(f"grouping names {grouping.n_concepts} concepts but {len(refs)} references given",
                         code="E_GROUPING")
    if grouping.n_tokens > len(prompt_tokens):
        raise UsageError("token grouping refers past the end of the prompt", code="E_GROUPING")

    model = _as_float64(model)
    mcfg = model.config
    refs = [ReferenceConcept(r.image.to(torch.float64), r.mask, r.tokens, r.weight, r.name) for r in refs]
    ts = sampling_timesteps(sched, config.steps)
    rng = Rng(config.seed)
    z = gaussian(rng.child(0), (mcfg.in_channels, mcfg.image_size, mcfg.image_size))
    cond, uncond = encode_tokens(model, prompt_tokens), encode_tokens(model, [])

    blocks = tuple(sorted(config.blocks))
    res = {b: mcfg.block_resolution(b) for b in blocks}
    target = max(res.values())
    inject = config.inject and bool(refs)
    cache, masks = None, []
    if inject:
        weights = config.concept_weights(len(refs))
        masks = [prepare_mask_logits(r.mask, w, res) for r, w in zip(refs, weights)]
        cache = extract_reference_kv(model, refs, sched, ts, blocks, rng.child(1))

    art = GenerationArtifacts(image=np.zeros(0), latent=z, timesteps=ts, stages=[], cache=cache, config=config)
    prev_agg = None
    for k, t in enumerate(ts):
        stage = stage_for_step(k, config.alpha, config.steps)
        art.stages.append(stage)
        hook = None
        keep = k in config.record_steps
        if stage == RBA:
            # segmentation always reads vanilla attention maps of the conditional branch
            _, probe = denoise(model, z, t, cond)
            smap, prev_agg = latent_semantic_map(probe, grouping, target, refine=config.refine,
                                                 previous=prev_agg, ema=config.ema)
            art.semantic_maps[k] = smap
            if inject:
                labels = {b: downsample_labels(smap, res[b]).flat() for b in blocks}
                hook = InjectionHook(blocks, cache, masks, t, RBA, mcfg.head_dim, config.strict_mask,
                                     labels, art.consumed)
        elif inject:
            hook = InjectionHook(blocks, cache, masks, t, RSA, mcfg.head_dim, config.strict_mask,
                                 consumed=art.consumed)

        eps_c, rec = denoise(model, z, t, cond, hook=hook, record=keep)
        if keep:
            art.records[k] = rec
        eps_u, _ = denoise(model, z, t, uncond, hook=hook if config.inject_uncond else None, record=False)
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        z = ddim_step(z, cfg_combine(eps_u, eps_c, config.cfg_scale), t, t_prev, sched)
        _check_latent(z, k, t)

    art.latent = z
    art.image = to_image(z)
    if art.semantic_maps:
        seen = set()
        for m in art.semantic_maps.values():
            seen |= set(torch.unique(m.labels).tolist())
        art.absent_concepts = [i for i in range(1, grouping.n_concepts + 1) if i not in seen]
    return art
