"""The noise-prediction network.

Input and output live on a ``[batch, channels, tokens, frames]`` grid:
tokens are the joints of both agents stacked (caregiver first), frames the
``O + F`` time steps. Observed frames enter as clean conditioning values,
future frames as the current noisy sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from ..errors import ConfigError
from ..nn import LayerNorm, MultiHeadAttention, PointwiseConv1d, check_finite


@dataclass(frozen=True)
class IDDConfig:
    feat_dim: int = 3
    n_tokens: int = 42
    obs_len: int = 24
    fut_len: int = 24
    channels: int = 64
    heads: int = 4
    ffn: int = 64
    blocks: int = 4
    step_emb: int = 128
    diffusion_steps: int = 50
    representation: str = "position"
    # agent whose observation is zeroed ("cg", "cr") or "" for none
    ablate: str = ""
    # diffuse per-feature standardized data (zero mean, unit std per token and dim)
    standardize: bool = False

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.representation not in ("position", "angle"):
            raise ConfigError(f"unknown representation {self.representation!r}")
        if self.ablate not in ("", "cg", "cr"):
            raise ConfigError(f"ablate must be '', 'cg' or 'cr', got {self.ablate!r}")
        if self.n_tokens % 2:
            raise ConfigError("token count must be even (two agents)")

    @property
    def frames(self) -> int:
        return self.obs_len + self.fut_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IDDConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sinusoidal_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = positions.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).float()


class TransformerLayer(nn.Module):
    """Post-norm self-attention + feed-forward layer over ``[batch, tokens, dim]``."""

    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ffn)
        self.ff2 = nn.Linear(ffn, dim)
        self.norm2 = LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff2(torch.nn.functional.gelu(self.ff1(x))))


class ResidualBlock(nn.Module):
    def __init__(self, cfg: IDDConfig):
        super().__init__()
        C = cfg.channels
        self.step_proj = nn.Linear(C, C)
        self.temporal = TransformerLayer(C, cfg.heads, cfg.ffn)
        self.spatial = TransformerLayer(C, cfg.heads, cfg.ffn)
        self.mid = PointwiseConv1d(C, 2 * C)
        self.out = PointwiseConv1d(C, 2 * C)

    def forward(self, h, side, step):
        B, C, K, L = h.shape
        y = h + side + self.step_proj(step)[:, :, None, None]
        # temporal attention: one sequence of L frames per (sample, token)
        y = y.permute(0, 2, 3, 1).reshape(B * K, L, C)
        y = self.temporal(y)
        # spatial attention: one sequence of K tokens per (sample, frame)
        y = y.reshape(B, K, L, C).transpose(1, 2).reshape(B * L, K, C)
        y = self.spatial(y)
        y = y.reshape(B, L, K, C).permute(0, 3, 2, 1).reshape(B, C, K * L)
        gate, filt = self.mid(y).chunk(2, dim=1)
        y = self.out(torch.sigmoid(gate) * torch.tanh(filt))
        residual, skip = y.reshape(B, 2 * C, K, L).chunk(2, dim=1)
        return (h + residual) / math.sqrt(2.0), skip


class Denoiser(nn.Module):
    def __init__(self, cfg: IDDConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.embed = PointwiseConv1d(2 * cfg.feat_dim + 1, C)
        self.register_buffer("step_table", sinusoidal_table(torch.arange(cfg.diffusion_steps + 1), cfg.step_emb),
                             persistent=False)
        self.step_mlp1 = nn.Linear(cfg.step_emb, C)
        self.step_mlp2 = nn.Linear(C, C)
        self.register_buffer("time_pe", sinusoidal_table(torch.arange(cfg.frames), C), persistent=False)
        self.joint_emb = nn.Parameter(torch.randn(cfg.n_tokens, C) * 0.1)
        self.blocks = nn.ModuleList(ResidualBlock(cfg) for _ in range(cfg.blocks))
        self.decode1 = PointwiseConv1d(C, C)
        self.decode2 = PointwiseConv1d(C, cfg.feat_dim, zero_init=True)

    def forward(self, cond: torch.Tensor, noisy: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``noisy``.

        ``cond`` and ``noisy`` are ``[B, D, K, L]``: ``cond`` is zero on future
        frames, ``noisy`` is zero on observed frames. ``t`` is ``[B]``.
        """
        cfg = self.cfg
        B, D, K, L = noisy.shape
        if cond.shape != noisy.shape or D != cfg.feat_dim or K != cfg.n_tokens or L != cfg.frames:
            raise ConfigError(f"denoiser built for [*, {cfg.feat_dim}, {cfg.n_tokens}, {cfg.frames}], "
                              f"got cond {tuple(cond.shape)} noisy {tuple(noisy.shape)}")
        mask = torch.zeros(1, 1, K, L, dtype=noisy.dtype)
        mask[..., : cfg.obs_len] = 1.0
        x = torch.cat([cond, noisy, mask.expand(B, 1, K, L)], dim=1).reshape(B, 2 * D + 1, K * L)
        h = torch.nn.functional.silu(self.embed(x)).reshape(B, cfg.channels, K, L)
        check_finite(h, "embedding convolution")

        step = self.step_table[t]
        step = torch.nn.functional.silu(self.step_mlp2(torch.nn.functional.silu(self.step_mlp1(step))))
        side = self.time_pe.T[:, None, :] + self.joint_emb.T[:, :, None]

        skips = 0
        for i, block in enumerate(self.blocks):
            h, skip = block(h, side, step)
            check_finite(h, f"residual block {i}")
            skips = skips + skip
        s = (skips / math.sqrt(len(self.blocks))).reshape(B, cfg.channels, K * L)
        out = self.decode2(torch.nn.functional.silu(self.decode1(s)))
        check_finite(out, "decoder convolution")
        return out.reshape(B, D, K, L)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
