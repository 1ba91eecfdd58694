"""Point-set detector: conv backbone -> attention encoder with top-n query selection ->
decoder with iterative reference-point refinement.

Every stage emits a :class:`PredictionSet`; the encoder set comes first, then one set
per decoder layer.  Coordinates are normalized ``(u, v)`` (rows, columns) in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .aat import ConfigError


@dataclass
class DetectorConfig:
    num_classes: int = 3
    num_queries: int = 1000
    embed_dim: int = 128
    num_heads: int = 8
    ffn_dim: int = 512
    encoder_layers: int = 3
    decoder_layers: int = 3
    backbone_channels: tuple[int, int, int] = (32, 64, 128)
    # decoder offsets are tanh-bounded to this many normalized units per layer
    max_offset: float = 0.1

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be >= 1, got {self.num_queries}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.backbone_channels) != 3:
            raise ConfigError("backbone_channels needs exactly 3 entries")


@dataclass
class PredictionSet:
    """Centroid proposals; ``scores[..., -1]`` is the empty category."""

    coords: Tensor
    scores: Tensor
    source: int = 0

    def __len__(self) -> int:
        return self.coords.shape[-2]

    @property
    def confidence(self) -> Tensor:
        return self.scores[..., :-1].max(dim=-1).values

    def select(self, index) -> "PredictionSet":
        return PredictionSet(self.coords[index], self.scores[index], self.source)

    def detach(self) -> "PredictionSet":
        return PredictionSet(self.coords.detach(), self.scores.detach(), self.source)

    def pixel_coords(self, height: int, width: int) -> Tensor:
        return self.coords * self.coords.new_tensor([float(height), float(width)])


@dataclass
class FeatureStack:
    maps: list[Tensor] = field(default_factory=list)

    @property
    def strides(self) -> list[int]:
        return [8, 16, 32][: len(self.maps)]


def _conv(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Small strided conv net producing stride 8/16/32 feature maps."""

    min_size = 32

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(_conv(3, c1, 2), _conv(c1, c1, 2))
        self.stage1 = nn.Sequential(_conv(c1, c1, 2), _conv(c1, c1, 1))
        self.stage2 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1))

    def forward(self, image: Tensor) -> FeatureStack:
        H, W = image.shape[-2:]
        if H < self.min_size or W < self.min_size:
            raise ConfigError(f"image {H}x{W} smaller than the backbone's max stride {self.min_size}")
        x = self.stem(image)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return FeatureStack([f1, f2, f3])


def point_embedding(coords: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding of normalized ``(u, v)``; half the channels per axis."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, half, 2, device=coords.device) / half)
    freq = freq.to(coords.dtype) * 2 * math.pi
    parts = []
    for axis in range(2):
        arg = coords[..., axis : axis + 1] * freq
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn), nn.ReLU(inplace=True), nn.Linear(ffn, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, query: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor) -> Tensor:
        q = query + query_pos
        query = self.norm1(query + self.self_attn(q, q, query, need_weights=False)[0])
        attended = self.cross_attn(query + query_pos, memory + memory_pos, memory, need_weights=False)[0]
        query = self.norm2(query + attended)
        return self.norm3(query + self.ffn(query))


class PointDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DetectorConfig()
        E = cfg.embed_dim
        K1 = cfg.num_classes + 1
        self.backbone = Backbone(cfg.backbone_channels)
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, E, 1), nn.GroupNorm(8, E)) for c in cfg.backbone_channels
        )
        self.level_embed = nn.Parameter(torch.randn(len(cfg.backbone_channels), E) * 0.02)
        self.pos_proj = nn.Linear(E, E)
        enc_layer = nn.TransformerEncoderLayer(E, cfg.num_heads, cfg.ffn_dim, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.encoder_layers, enable_nested_tensor=False)
        self.enc_class = nn.Linear(E, K1)
        self.enc_offset = nn.Sequential(nn.Linear(E, E), nn.ReLU(inplace=True), nn.Linear(E, 2))
        self.query_proj = nn.Sequential(nn.Linear(E, E), nn.LayerNorm(E))
        self.query_pos = nn.Sequential(nn.Linear(E, E), nn.ReLU(inplace=True), nn.Linear(E, E))
        self.decoder = nn.ModuleList(
            DecoderLayer(E, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers)
        )
        self.dec_class = nn.ModuleList(nn.Linear(E, K1) for _ in range(cfg.decoder_layers))
        self.dec_offset = nn.ModuleList(
            nn.Sequential(nn.Linear(E, E), nn.ReLU(inplace=True), nn.Linear(E, 2))
            for _ in range(cfg.decoder_layers)
        )
        for head in [self.enc_offset, *self.dec_offset]:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    # -- stages -------------------------------------------------------------

    def flatten_features(self, features: FeatureStack):
        """Project and flatten all levels: returns (tokens, pos, cell_centers, cell_sizes)."""
        tokens, centers, sizes = [], [], []
        for level, fmap in enumerate(features.maps):
            x = self.input_proj[level](fmap)
            B, E, h, w = x.shape
            tokens.append(x.flatten(2).transpose(1, 2) + self.level_embed[level])
            cu, cv = torch.meshgrid(
                (torch.arange(h, dtype=x.dtype) + 0.5) / h,
                (torch.arange(w, dtype=x.dtype) + 0.5) / w,
                indexing="ij",
            )
            centers.append(torch.stack([cu.reshape(-1), cv.reshape(-1)], dim=-1))
            sizes.append(x.new_tensor([1.0 / h, 1.0 / w]).expand(h * w, 2))
        centers = torch.cat(centers)
        pos = self.pos_proj(point_embedding(centers, self.cfg.embed_dim))
        return torch.cat(tokens, dim=1), pos, centers, torch.cat(sizes)

    def encode(self, features: FeatureStack):
        tokens, pos, centers, sizes = self.flatten_features(features)
        memory = self.encoder(tokens + pos)
        scores = self.enc_class(memory).softmax(-1)
        coords = centers + self.enc_offset(memory) * sizes
        n = min(self.cfg.num_queries, memory.shape[1])
        confidence = scores[..., :-1].max(dim=-1).values
        keep = confidence.topk(n, dim=1).indices  # (B, n), sorted by confidence
        take = lambda t: t.gather(1, keep.unsqueeze(-1).expand(-1, -1, t.shape[-1]))
        enc_set = PredictionSet(take(coords), take(scores), source=0)
        queries = self.query_proj(take(memory))
        refs = enc_set.coords.detach()
        return enc_set, queries, refs, memory, pos.expand_as(memory), keep

    def decode(self, queries: Tensor, refs: Tensor, memory: Tensor, memory_pos: Tensor):
        sets = []
        for j, layer in enumerate(self.decoder):
            qpos = self.query_pos(point_embedding(refs, self.cfg.embed_dim))
            queries = layer(queries, qpos, memory, memory_pos)
            offset = self.cfg.max_offset * torch.tanh(self.dec_offset[j](queries))
            coords = refs + offset
            scores = self.dec_class[j](queries).softmax(-1)
            sets.append(PredictionSet(coords, scores, source=j + 1))
            refs = coords.detach()
        return sets

    def forward(self, image: Tensor) -> list[PredictionSet]:
        """``(B, 3, H, W)`` -> ``D + 1`` batched sets (encoder first)."""
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        features = self.backbone(x)
        enc_set, queries, refs, memory, memory_pos, _ = self.encode(features)
        sets = [enc_set, *self.decode(queries, refs, memory, memory_pos)]
        return sets if batched else [s.select(0) for s in sets]


def final_set(sets: list[PredictionSet]) -> PredictionSet:
    if len(sets) < 2:
        raise ValueError("need an encoder set and at least one decoder set")
    return sets[-1]
