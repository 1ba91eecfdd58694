"""Adaptive affine transformer: image -> M clamped affine matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import Tensor, nn

from .geometry import IDENTITY_PARAMS, clamp_affine


class ConfigError(ValueError):
    pass


@dataclass
class AATConfig:
    patch_size: int = 16
    embed_dim: int = 128
    num_layers: int = 2
    num_matrices: int = 4
    num_heads: int = 8
    ffn_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be positive and even, got {self.embed_dim}")
        if self.num_matrices < 1:
            raise ConfigError(f"num_matrices must be >= 1, got {self.num_matrices}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split ``(..., C, H, W)`` into row-major patches ``(..., HW/P^2, C*P*P)``."""
    H, W = image.shape[-2:]
    if H % patch_size or W % patch_size:
        raise ConfigError(f"patch size {patch_size} does not divide image size {H}x{W}")
    return rearrange(image, "... c (h p1) (w p2) -> ... (h w) (c p1 p2)", p1=patch_size, p2=patch_size)


def unpatchify(patches: Tensor, patch_size: int, height: int, width: int) -> Tensor:
    return rearrange(
        patches,
        "... (h w) (c p1 p2) -> ... c (h p1) (w p2)",
        h=height // patch_size,
        p1=patch_size,
        p2=patch_size,
    )


def sinusoidal_embedding(num_positions: int, dim: int) -> Tensor:
    """Standard sine/cosine table: even slots sin, odd slots cos, frequencies ``10000^(-2i/dim)``."""
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding needs an even dimension, got {dim}")
    pos = torch.arange(num_positions, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(num_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.float()


class AdaptiveAffineTransformer(nn.Module):
    """Patch embedding + sinusoidal positions + 2-layer transformer encoder, mean-pooled
    and projected to ``6 * M`` raw parameters, clamped per matrix.

    The output projection starts at zero weights with identity biases, so a fresh
    module emits M identity transforms.
    """

    def __init__(self, cfg: AATConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or AATConfig()
        P = cfg.patch_size
        self.patch_proj = nn.Linear(3 * P * P, cfg.embed_dim)
        layer = nn.TransformerEncoderLayer(
            cfg.embed_dim,
            cfg.num_heads,
            dim_feedforward=cfg.ffn_ratio * cfg.embed_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.num_layers, enable_nested_tensor=False)
        self.head = nn.Linear(cfg.embed_dim, 6 * cfg.num_matrices)
        self.reset_head()

    def reset_head(self):
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor(IDENTITY_PARAMS).repeat(self.cfg.num_matrices))

    def raw_params(self, image: Tensor) -> Tensor:
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        tokens = self.patch_proj(patchify(x, self.cfg.patch_size))
        pos = sinusoidal_embedding(tokens.shape[1], self.cfg.embed_dim).to(tokens)
        h = self.encoder(tokens + pos)
        raw = self.head(h.mean(dim=1)).view(x.shape[0], self.cfg.num_matrices, 6)
        return raw if batched else raw[0]

    def forward(self, image: Tensor) -> Tensor:
        """``(3, H, W)`` -> ``(M, 2, 3)``; ``(B, 3, H, W)`` -> ``(B, M, 2, 3)``."""
        if image.shape[-3] != 3:
            raise ConfigError(f"expected 3-channel image, got shape {tuple(image.shape)}")
        return clamp_affine(self.raw_params(image))
