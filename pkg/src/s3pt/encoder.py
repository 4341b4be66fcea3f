"""Toy patch-mixing encoder, projection head, EMA teacher and schedules."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    view_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    input_channels: int = 4
    head_hidden: int = 128
    head_bottleneck: int = 64
    num_prototypes: int = 256

    def __post_init__(self):
        if self.view_size % self.patch_size:
            raise ValueError("patch_size must divide view_size")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.view_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2


def patchify(pixels: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, H, W, C] -> [B, P, patch_size * patch_size * C], tokens in row-major order."""
    b, h, w, c = pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"view {h}x{w} is not divisible by patch size {patch_size}")
    x = pixels.reshape(b, h // patch_size, patch_size, w // patch_size, patch_size, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch_size) * (w // patch_size), -1)


class MixerBlock(nn.Module):
    def __init__(self, num_tokens: int, dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=torch.float64)
        self.token_mix = nn.Sequential(
            nn.Linear(num_tokens, num_tokens, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(num_tokens, num_tokens, dtype=torch.float64),
        )
        self.norm2 = nn.LayerNorm(dim, dtype=torch.float64)
        self.channel_mix = nn.Sequential(
            nn.Linear(dim, 2 * dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(2 * dim, dim, dtype=torch.float64),
        )

    def forward(self, x):
        x = x + self.token_mix(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mix(self.norm2(x))


class PatchEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.patch_size**2 * cfg.input_channels, cfg.embed_dim, dtype=torch.float64)
        self.blocks = nn.ModuleList(MixerBlock(cfg.num_tokens, cfg.embed_dim) for _ in range(cfg.depth))

    def forward(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (global [B, d], dense [B, P, d]), both L2-normalized."""
        pixels = torch.as_tensor(pixels, dtype=torch.float64)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[-1] != self.cfg.input_channels:
            raise ValueError(f"expected {self.cfg.input_channels} channels, got {pixels.shape[-1]}")
        x = self.embed(patchify(pixels, self.cfg.patch_size))
        if x.shape[1] != self.cfg.num_tokens and self.cfg.depth > 0:
            raise ValueError(f"expected {self.cfg.num_tokens} tokens, got {x.shape[1]}")
        for block in self.blocks:
            x = block(x)
        return F.normalize(x.mean(dim=1), dim=-1), F.normalize(x, dim=-1)


class ProjectionHead(nn.Module):
    """Three-layer MLP to a unit-norm bottleneck embedding."""

    def __init__(self, in_dim: int, hidden: int, bottleneck: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(hidden, hidden, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(hidden, bottleneck, dtype=torch.float64),
        )

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(rep), dim=-1)


class Network(nn.Module):
    """Backbone + projection head + prototype weights (the last linear layer)."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.backbone = PatchEncoder(cfg)
        self.head = ProjectionHead(cfg.embed_dim, cfg.head_hidden, cfg.head_bottleneck)
        self.prototypes = nn.Parameter(torch.empty(cfg.num_prototypes, cfg.head_bottleneck, dtype=torch.float64))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif p.ndim >= 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                else:
                    p.zero_()
            self.prototypes.copy_(F.normalize(torch.randn(self.prototypes.shape, generator=gen, dtype=torch.float64), dim=-1))

    def encode(self, pixels):
        return self.backbone(pixels)

    def project(self, rep):
        return self.head(rep)


def encode(pixels, network: Network):
    return network.encode(pixels)


def project(rep, head: ProjectionHead):
    return head(rep)


def cosine_interp(start: float, end: float, step: int, total: int) -> float:
    """Cosine ramp from ``start`` at step 0 to ``end`` at step ``total - 1``."""
    if total <= 1:
        return end
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class Schedules:
    total_steps: int
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    temp_warmup_steps: int = 30
    wd_start: float = 0.04
    wd_end: float = 0.4
    lr: float = 1e-3
    min_lr: float = 1e-5
    lr_warmup_fraction: float = 0.1

    def momentum(self, step: int) -> float:
        return cosine_interp(self.momentum_start, self.momentum_end, step, self.total_steps)

    def teacher_temp(self, step: int) -> float:
        if self.temp_warmup_steps <= 0:
            return self.teacher_temp_end
        frac = min(step / self.temp_warmup_steps, 1.0)
        return self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * frac

    def weight_decay(self, step: int) -> float:
        return cosine_interp(self.wd_start, self.wd_end, step, self.total_steps)

    def learning_rate(self, step: int) -> float:
        warm = max(1, int(self.lr_warmup_fraction * self.total_steps))
        if step < warm:
            return self.lr * (step + 1) / warm
        return cosine_interp(self.lr, self.min_lr, step - warm, self.total_steps - warm)

    def __call__(self, step: int) -> tuple[float, float, float]:
        return self.momentum(step), self.teacher_temp(step), self.weight_decay(step)


class ModelPair:
    """Student network and its EMA teacher (same shapes, teacher never optimized)."""

    def __init__(self, student: Network, schedules: Schedules):
        self.student = student
        self.teacher = copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.schedules = schedules


@torch.no_grad()
def ema_update(pair: ModelPair, step: int, momentum: float | None = None) -> ModelPair:
    """teacher <- m * teacher + (1 - m) * student, with m from the cosine schedule."""
    if momentum is None:
        if step >= pair.schedules.total_steps:
            raise ValueError(f"step {step} is past the training horizon")
        momentum = pair.schedules.momentum(step)
    for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            t.copy_(s)
        else:
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    return pair
