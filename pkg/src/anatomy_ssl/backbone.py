"""Tiny siamese ViT: encoder, projection head, mask-token decoder and EMA teacher.

There is no class token. Token ``j`` is raster-order patch ``j`` of the input.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, IntegrityError

# grey-level analogue of the ImageNet normalisation
PIXEL_MEAN = 0.449
PIXEL_STD = 0.226


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dec_dim: int = 96
    dec_depth: int = 2
    dec_heads: int = 4
    num_prototypes: int = 64  # K
    head_hidden: int = 256

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads or self.dec_dim % self.dec_heads:
            raise ConfigurationError("embedding widths must be divisible by head counts")
        if self.num_prototypes < 2:
            raise ConfigurationError("need at least 2 prototype classes")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @classmethod
    def full_scale(cls, num_prototypes: int = 256) -> "BackboneConfig":
        """ViT-B/16 encoder at 224 px with an 8-layer, 512-wide decoder."""
        return cls(image_size=224, patch=16, dim=768, depth=12, heads=12, dec_dim=512, dec_depth=8,
                   dec_heads=16, num_prototypes=num_prototypes)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W) -> (B, L, patch*patch), raster order over patches and pixels."""
    b, h, w = images.shape
    if h % patch or w % patch:
        raise IntegrityError(f"image shape {(h, w)} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch)
    return x.permute(0, 1, 3, 2, 4).reshape(b, (h // patch) * (w // patch), patch * patch)


def unpatchify(patches: torch.Tensor, patch: int, height: int, width: int) -> torch.Tensor:
    b = patches.shape[0]
    x = patches.reshape(b, height // patch, width // patch, patch, patch)
    return x.permute(0, 1, 3, 2, 4).reshape(b, height, width)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class ViTEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.patch = cfg.patch
        self.num_tokens = cfg.num_tokens
        self.dim = cfg.dim
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.patch_embed.weight, std=0.02)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Patch embedding plus positions, before any attention."""
        tokens = patchify((images - PIXEL_MEAN) / PIXEL_STD, self.patch)
        if tokens.shape[1] != self.num_tokens:
            raise IntegrityError(f"got {tokens.shape[1]} tokens, positional embedding has {self.num_tokens}")
        return self.patch_embed(tokens) + self.pos_embed

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.embed(images)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class ProjectionHead(nn.Module):
    def __init__(self, dim: int, num_prototypes: int, hidden: int = 256):
        super().__init__()
        self.in_dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, num_prototypes))
        self.apply(_init_weights)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise IntegrityError(f"token width {z.shape[-1]} != head input width {self.in_dim}")
        return self.mlp(z)


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.in_dim = cfg.dim
        self.num_tokens = cfg.num_tokens
        self.adapter = nn.Linear(cfg.dim, cfg.dec_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.dec_dim))
        self.blocks = nn.ModuleList(Block(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth))
        self.norm = nn.LayerNorm(cfg.dec_dim)
        self.pred = nn.Linear(cfg.dec_dim, cfg.patch * cfg.patch)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim or z.shape[-2] != self.num_tokens:
            raise IntegrityError(f"decoder expects (*, {self.num_tokens}, {self.in_dim}), got {tuple(z.shape)}")
        x = self.adapter(z) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class SiameseModel(nn.Module):
    """Student encoder + head, EMA teacher encoder + head, decoder and mask token."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.student = ViTEncoder(cfg)
        self.student_head = ProjectionHead(cfg.dim, cfg.num_prototypes, cfg.head_hidden)
        self.decoder = Decoder(cfg)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.teacher = copy.deepcopy(self.student)
        self.teacher_head = copy.deepcopy(self.student_head)
        for p in self.teacher_parameters():
            p.requires_grad_(False)

    def teacher_parameters(self):
        yield from self.teacher.parameters()
        yield from self.teacher_head.parameters()

    def trainable_named_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("teacher"):
                yield name, p


@torch.no_grad()
def encode(encoder: ViTEncoder, image) -> torch.Tensor:
    """Deterministic forward pass of one (H, W) image or a (B, H, W) batch."""
    was_training = encoder.training
    encoder.eval()
    x = torch.as_tensor(np.asarray(image), dtype=next(encoder.parameters()).dtype)
    single = x.ndim == 2
    out = encoder(x[None] if single else x)
    encoder.train(was_training)
    return out[0] if single else out


def project(head: ProjectionHead, z: torch.Tensor) -> torch.Tensor:
    return head(z)


def substitute_mask_tokens(z: torch.Tensor, labels, z_mask: torch.Tensor) -> torch.Tensor:
    """Replace rows flagged abnormal with ``z_mask``; other rows pass through untouched."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.bool)
    if labels.shape != z.shape[:-1]:
        raise IntegrityError(f"labels shape {tuple(labels.shape)} does not match tokens {tuple(z.shape[:-1])}")
    if z_mask.shape != z.shape[-1:]:
        raise IntegrityError(f"mask token width {tuple(z_mask.shape)} != token width {z.shape[-1]}")
    return torch.where(labels[..., None], z_mask.to(z.dtype).expand_as(z), z)


def decode(decoder: Decoder, z_tilde: torch.Tensor) -> torch.Tensor:
    return decoder(z_tilde)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, lam: float) -> nn.Module:
    """``p_T <- lam * p_T + (1 - lam) * p_S`` for every parameter pair, in place."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"EMA factor must lie in [0, 1], got {lam}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise IntegrityError("teacher and student parameter trees differ")
    if lam == 1.0:
        return teacher
    for pt, ps in zip(t_params, s_params):
        if lam == 0.0:
            pt.copy_(ps)
        else:
            pt.mul_(lam).add_(ps, alpha=1.0 - lam)
    return teacher


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

