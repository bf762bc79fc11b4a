"""Small pixel-space U-Net with hookable self-attention.

Residual blocks are numbered from 1 in forward order: one encoder block per
level (finest first), one middle block, one decoder block per level (coarsest
first). A model with ``levels=3`` therefore has blocks 1..7, and blocks 5 and 6
are the two decoder blocks at the coarse resolutions (8x8 and 16x16 for a
32x32 input). Blocks listed in ``attn_blocks`` carry a self-attention and a
cross-attention layer after the residual block.

Self-attention can be overridden per call with a hook
``hook(block, q, k, v) -> Tensor | None`` where q/k/v are ``(B, n, d)``.
Returning ``None`` keeps the vanilla output. The vanilla self-attention map
is always computed from the layer's own q and k, so records hold the
original maps even while a hook replaces the output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from ..diffusion import build_schedule
from ..errors import UsageError
from ..numerics import Rng, softmax

AttentionHook = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], Optional[torch.Tensor]]


@dataclass
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    levels: int = 3
    head_dim: int = 32
    attn_blocks: Optional[list[int]] = None
    vocab_size: int = 9
    token_dim: int = 32
    max_tokens: int = 7
    num_timesteps: int = 1000
    channel_mult: Optional[list[int]] = None
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # eps = sqrt(1 - abar) * z + sqrt(abar) * net(z): keeps the noise estimate
    # well conditioned near t = T, where 1 / sqrt(abar) amplifies any error
    noise_skip: bool = True

    def __post_init__(self):
        if self.channel_mult is None:
            self.channel_mult = [min(2**lvl, 2) for lvl in range(self.levels)]
        if self.attn_blocks is None:
            coarse = {self.levels - 1, max(self.levels - 2, 0)}
            self.attn_blocks = [b for b in range(1, self.num_blocks + 1)
                                if self.block_level(b) in coarse]
        self.attn_blocks = sorted(int(b) for b in self.attn_blocks)
        self.validate()

    @property
    def num_blocks(self) -> int:
        return 2 * self.levels + 1

    def validate(self) -> None:
        if self.levels < 1:
            raise UsageError("levels must be >= 1")
        if self.image_size % (2 ** (self.levels - 1)):
            raise UsageError(f"image_size {self.image_size} not divisible by 2^(levels-1)")
        if self.head_dim < 1 or self.base_channels < 1 or self.token_dim < 1:
            raise UsageError("head_dim, base_channels and token_dim must be >= 1")
        if len(self.channel_mult) != self.levels:
            raise UsageError("channel_mult needs one entry per level")
        if len(set(self.attn_blocks)) != len(self.attn_blocks):
            raise UsageError("attention block indices must be unique")
        bad = [b for b in self.attn_blocks if not 1 <= b <= self.num_blocks]
        if bad:
            raise UsageError(f"attention blocks {bad} outside 1..{self.num_blocks}")
        if self.vocab_size < 1 or self.max_tokens < 1:
            raise UsageError("vocab_size and max_tokens must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_mult[level]

    def block_level(self, block: int) -> int:
        L = self.levels
        if block <= L:
            return block - 1
        if block == L + 1:
            return L - 1
        return L - 1 - (block - L - 2)

    def block_resolution(self, block: int) -> tuple[int, int]:
        s = self.image_size // 2 ** self.block_level(block)
        return (s, s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _groups(c: int) -> int:
    return math.gcd(8, c)


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb.to(dtype)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


@dataclass
class LayerRecord:
    """Everything observed at one attention block during one forward pass."""

    self_map: torch.Tensor  # (B, n, n), vanilla Softmax(QK^T/sqrt d)
    cross_map: torch.Tensor  # (B, n, K)
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    out: torch.Tensor  # self-attention output actually used (hooked or not)
    resolution: tuple[int, int] = (0, 0)


@dataclass
class AttnRecord:
    layers: dict[int, LayerRecord] = field(default_factory=dict)
    keep_grad: bool = False  # keep cross maps in the autograd graph (training)

    def __getitem__(self, block: int) -> LayerRecord:
        return self.layers[block]

    def __contains__(self, block: int) -> bool:
        return block in self.layers

    def blocks(self) -> list[int]:
        return sorted(self.layers)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, head_dim: int, token_dim: int):
        super().__init__()
        self.head_dim = head_dim
        self.norm_self = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, head_dim, bias=False)
        self.to_k = nn.Linear(channels, head_dim, bias=False)
        self.to_v = nn.Linear(channels, head_dim, bias=False)
        self.proj_self = nn.Linear(head_dim, channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.to_q_cross = nn.Linear(channels, head_dim, bias=False)
        self.to_k_cross = nn.Linear(token_dim, head_dim, bias=False)
        self.to_v_cross = nn.Linear(token_dim, head_dim, bias=False)
        self.proj_cross = nn.Linear(head_dim, channels)

    def forward(self, x, context, block: int, hook: Optional[AttentionHook], record: Optional[AttnRecord]):
        B, C, H, W = x.shape
        h = x.flatten(2).transpose(1, 2)  # (B, n, C)
        scale = 1.0 / math.sqrt(self.head_dim)

        hn = self.norm_self(h)
        q, k, v = self.to_q(hn), self.to_k(hn), self.to_v(hn)
        s_map = softmax(q @ k.transpose(1, 2) * scale, axis=-1)
        out = s_map @ v
        if hook is not None:
            hooked = hook(block, q, k, v)
            if hooked is not None:
                if hooked.shape != out.shape:
                    raise UsageError(f"hook output shape {tuple(hooked.shape)} != {tuple(out.shape)}")
                out = hooked.to(out.dtype)
        h = h + self.proj_self(out)

        hn = self.norm_cross(h)
        qc = self.to_q_cross(hn)
        kc, vc = self.to_k_cross(context), self.to_v_cross(context)
        c_map = softmax(qc @ kc.transpose(1, 2) * scale, axis=-1)
        h = h + self.proj_cross(c_map @ vc)

        if record is not None:
            record.layers[block] = LayerRecord(
                self_map=s_map if record.keep_grad else s_map.detach(), cross_map=c_map if record.keep_grad else c_map.detach(), q=q.detach(), k=k.detach(),
                v=v.detach(), out=out.detach(), resolution=(H, W))
        return h.transpose(1, 2).reshape(B, C, H, W)


class ToyUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        base = cfg.base_channels
        tdim = 2 * base
        L = cfg.levels
        self.time_mlp = nn.Sequential(nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.token_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.channels(0), 3, padding=1)

        self.res = nn.ModuleDict()
        self.attn = nn.ModuleDict()
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()

        c_prev = cfg.channels(0)
        for lvl in range(L):
            c = cfg.channels(lvl)
            self.res[str(lvl + 1)] = ResBlock(c_prev, c, tdim)
            c_prev = c
            if lvl < L - 1:
                self.down.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.res[str(L + 1)] = ResBlock(c_prev, c_prev, tdim)
        for i, lvl in enumerate(range(L - 1, -1, -1)):
            c = cfg.channels(lvl)
            self.res[str(L + 2 + i)] = ResBlock(c_prev + c, c, tdim)
            c_prev = c
            if lvl > 0:
                self.up.append(nn.Conv2d(c, c, 3, padding=1))
        for b in cfg.attn_blocks:
            self.attn[str(b)] = AttentionBlock(cfg.channels(cfg.block_level(b)), cfg.head_dim, cfg.token_dim)

        self.norm_out = nn.GroupNorm(_groups(cfg.channels(0)), cfg.channels(0))
        self.conv_out = nn.Conv2d(cfg.channels(0), cfg.in_channels, 3, padding=1)
        sched = build_schedule(cfg.num_timesteps, cfg.beta_min, cfg.beta_max)
        self.register_buffer("alpha_bar", sched.alpha_bar.clone(), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.conv_in.weight.dtype

    def _block(self, b, h, temb, ctx, hook, record):
        h = self.res[str(b)](h, temb)
        if str(b) in self.attn:
            h = self.attn[str(b)](h, ctx, b, hook, record)
        return h

    def forward(self, z, t, tokens, hook: Optional[AttentionHook] = None,
                record: Optional[AttnRecord] = None):
        L = self.config.levels
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels, z.dtype))
        ctx = self.token_embedding(tokens)
        h = self.conv_in(z)
        skips = []
        for lvl in range(L):
            h = self._block(lvl + 1, h, temb, ctx, hook, record)
            skips.append(h)
            if lvl < L - 1:
                h = self.down[lvl](h)
        h = self._block(L + 1, h, temb, ctx, hook, record)
        for i in range(L):
            h = torch.cat([h, skips.pop()], dim=1)
            h = self._block(L + 2 + i, h, temb, ctx, hook, record)
            if i < L - 1:
                h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.up[i](h)
        out = self.conv_out(nn.functional.silu(self.norm_out(h)))
        if not self.config.noise_skip:
            return out
        ab = self.alpha_bar.to(z.dtype)[t][:, None, None, None]
        return (1 - ab).sqrt() * z + ab.sqrt() * out


def init_parameters(model: nn.Module, rng: Rng) -> None:
    """Seeded re-initialisation; independent of torch's global RNG."""
    gen = rng.numpy
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[0].rsplit(".", 1)[-1]
            if leaf.startswith("norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "token_embedding" in name:
                p.copy_(torch.from_numpy(gen.standard_normal(tuple(p.shape))))
            else:
                fan_in = p.shape[1] * int(np.prod(p.shape[2:])) if p.dim() > 1 else None
                if fan_in is None:
                    # bias: reuse the fan-in of its sibling weight
                    fan_in = dict(model.named_parameters())[name[:-4] + "weight"][0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(gen.uniform(-bound, bound, size=tuple(p.shape))))


def build_unet(config: UNetConfig, rng: Rng, dtype: torch.dtype = torch.float32) -> ToyUNet:
    config.validate()
    model = ToyUNet(config)
    init_parameters(model, rng)
    return model.to(dtype)


def encode_tokens(model_or_cfg, tokens, batch: int = 1) -> torch.Tensor:
    """Pad a token-id sequence with the null id (0) to ``max_tokens``."""
    cfg = model_or_cfg.config if isinstance(model_or_cfg, ToyUNet) else model_or_cfg
    ids = [int(x) for x in tokens]
    if len(ids) > cfg.max_tokens:
        raise UsageError(f"{len(ids)} tokens exceed the configured maximum {cfg.max_tokens}")
    if any(not 0 <= i < cfg.vocab_size for i in ids):
        raise UsageError(f"token ids {ids} outside vocabulary of size {cfg.vocab_size}")
    ids = ids + [0] * (cfg.max_tokens - len(ids))
    return torch.tensor([ids] * batch, dtype=torch.long)


def denoise(model: ToyUNet, z_t: torch.Tensor, t: int, tokens, hook: Optional[AttentionHook] = None,
            record: bool = True) -> tuple[torch.Tensor, Optional[AttnRecord]]:
    """Noise prediction for a single latent ``(C, H, W)`` plus its attention record."""
    if not 0 <= int(t) <= model.config.num_timesteps:
        raise UsageError(f"timestep {t} outside 0..{model.config.num_timesteps}")
    tok = tokens if isinstance(tokens, torch.Tensor) and tokens.dim() == 2 else encode_tokens(model, tokens)
    rec = AttnRecord() if record else None
    with torch.no_grad():
        eps = model(z_t[None].to(model.dtype), torch.tensor([int(t)]), tok, hook=hook, record=rec)
    return eps[0], rec
