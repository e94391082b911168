"""Quality-score predictor guided by the quality half of the dual map.

Image features act as keys/values; the fused quality map supplies the
queries.  Only the quality half reaches this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dre import split_representation, to_tensor


class PredictorError(ValueError):
    pass


@dataclass
class ScorePrediction:
    score: float
    per_crop_scores: list[float] = field(default_factory=list)
    crop_count: int = 0

    def to_json(self) -> dict:
        return {"score": self.score, "per_crop_scores": self.per_crop_scores, "crop_count": self.crop_count}


class ChannelFusion(nn.Module):
    """1x1 and 3x3 branches, concatenated, then mixed to ``cout`` channels."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        if cin <= 0 or cout <= 0:
            raise PredictorError(f"channel counts must be positive, got {cin} -> {cout}")
        half = max(1, cout // 2)
        self.point = nn.Conv2d(cin, half, 1)
        self.local = nn.Conv2d(cin, max(1, cout - half), 3, padding=1)
        self.mix = nn.Conv2d(half + max(1, cout - half), cout, 1)
        self.cin, self.cout = cin, cout

    def forward(self, q):
        return self.mix(F.gelu(torch.cat([self.point(q), self.local(q)], dim=1)))


def fuse_channels(quality_map: torch.Tensor, target_channels: int, fusion: ChannelFusion | None = None):
    if target_channels <= 0:
        raise PredictorError(f"target channel count must be positive, got {target_channels}")
    if fusion is None:
        fusion = ChannelFusion(quality_map.shape[1], target_channels)
    elif fusion.cout != target_channels:
        raise PredictorError(f"fusion block emits {fusion.cout} channels, {target_channels} requested")
    return fusion(quality_map)


def sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position code, ``(h*w, dim)``."""
    quarter = max(1, dim // 4)
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freq[None]
        parts += [ang.sin(), ang.cos()]
    pe = torch.cat(parts, dim=1)
    return F.pad(pe, (0, dim - pe.shape[1]))[:, :dim]


class CrossAttention(nn.Module):
    """Multi-head cross-attention.

    ``mode="spatial"`` attends over positions.  ``mode="channel"`` is the
    transposed form: attention maps are channel x channel, which needs
    queries and keys on the same grid.  ``uniform=True`` replaces the
    softmax weights with a flat average (test hook).
    """

    def __init__(self, dim: int, heads: int = 4, mode: str = "spatial"):
        super().__init__()
        if dim % heads:
            raise PredictorError(f"width {dim} not divisible by {heads} heads")
        if mode not in ("spatial", "channel"):
            raise PredictorError(f"unknown attention mode {mode!r}")
        self.heads, self.mode = heads, mode
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.uniform = False
        if mode == "channel":
            self.temperature = nn.Parameter(torch.ones(heads, 1, 1))

    def forward(self, x, ctx):
        n, lq, c = x.shape
        lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).reshape(n, lq, h, c // h).transpose(1, 2)
        k, v = self.kv(ctx).reshape(n, lk, 2, h, c // h).permute(2, 0, 3, 1, 4)
        if self.mode == "spatial":
            if self.uniform:
                attn = torch.full((n, h, lq, lk), 1.0 / lk, dtype=x.dtype)
            else:
                attn = (q @ k.transpose(-2, -1) / math.sqrt(c // h)).softmax(dim=-1)
            out = (attn @ v).transpose(1, 2).reshape(n, lq, c)
        else:
            if lq != lk:
                raise PredictorError("channel attention needs queries and keys on the same grid")
            q, k = F.normalize(q, dim=-2), F.normalize(k, dim=-2)
            attn = (q.transpose(-2, -1) @ k * self.temperature).softmax(dim=-1)
            out = (v @ attn.transpose(-2, -1)).transpose(1, 2).reshape(n, lq, c)
        return self.proj(out)


class GuidanceBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4, mode: str = "spatial", mlp_ratio: int = 2):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads, mode)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, q, kv):
        q = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return q + self.mlp(self.norm_mlp(q))


class Predictor(nn.Module):
    def __init__(
        self,
        rep_dim: int = 128,
        width: int = 128,
        n_guidance: int = 2,
        n_transformer: int = 2,
        heads: int = 4,
        attention: str = "spatial",
        positional: bool = True,
        quality_channels: tuple[int, ...] | None = None,
    ):
        super().__init__()
        self.rep_dim, self.width, self.attention, self.positional = rep_dim, width, attention, positional
        self.quality_channels = tuple(quality_channels or (rep_dim // 2,) * n_guidance)
        if len(self.quality_channels) != n_guidance:
            raise PredictorError("need one quality channel count per guidance block")
        self.stem = nn.Sequential(
            nn.Conv2d(3, width // 4, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width // 4, width // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
        )
        # quality half (rep_dim/2 channels) -> per-block C0, C1, ... -> width
        self.adapt = nn.ModuleList(
            nn.Identity() if c == rep_dim // 2 else nn.Conv2d(rep_dim // 2, c, 1) for c in self.quality_channels
        )
        self.fusion = nn.ModuleList(ChannelFusion(c, width) for c in self.quality_channels)
        self.guidance = nn.ModuleList(GuidanceBlock(width, heads, attention) for _ in range(n_guidance))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(width, heads, 2 * width, dropout=0.0, activation="gelu",
                                       batch_first=True, norm_first=True)
            for _ in range(n_transformer)
        )
        self.norm = nn.LayerNorm(width)
        self.head = nn.Sequential(nn.Linear(width, width // 2), nn.GELU(), nn.Linear(width // 2, 1))

    def image_tokens(self, x):
        f = self.stem(x)
        n, c, h, w = f.shape
        tokens = f.flatten(2).transpose(1, 2)
        if self.positional:
            tokens = tokens + sincos_2d(h, w, c).to(tokens.dtype)
        return tokens, (h, w)

    def score_from_tokens(self, quality_map, kv, kv_grid=None):
        """Score from a quality map ``(N, D/2, h, w)`` and image tokens ``(N, L, C)``."""
        tokens = None
        for adapt, fuse, block in zip(self.adapt, self.fusion, self.guidance):
            q = fuse(adapt(quality_map))
            if self.attention == "channel":
                q = F.interpolate(q, size=kv_grid, mode="bilinear", align_corners=False)
            q = q.flatten(2).transpose(1, 2)
            tokens = block(q if tokens is None else tokens + q, kv)
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.head(self.norm(tokens.mean(dim=1))).squeeze(-1)

    def forward(self, x, dual_map):
        if dual_map.shape[1] != self.rep_dim:
            raise PredictorError(
                f"predictor expects a {self.rep_dim}-channel dual map, got {dual_map.shape[1]} channels"
            )
        quality = split_representation(dual_map)[1]
        kv, grid = self.image_tokens(x)
        return self.score_from_tokens(quality, kv, grid)


def guided_score(encoder, predictor: Predictor, image) -> torch.Tensor:
    x = to_tensor(image)
    dual_map, _ = encoder(x)
    return predictor(x, dual_map)


def random_crops(image: np.ndarray, crop: int, n_crops: int, seed: int) -> list[np.ndarray]:
    h, w = image.shape[:2]
    if h < crop or w < crop:
        raise PredictorError(f"image is {h}x{w}, needs at least {crop}x{crop} for cropping")
    g = np.random.default_rng(seed)
    ys = g.integers(0, h - crop + 1, size=n_crops)
    xs = g.integers(0, w - crop + 1, size=n_crops)
    return [image[y : y + crop, x : x + crop] for y, x in zip(ys, xs)]


@torch.no_grad()
def predict_mos(encoder, predictor: Predictor, image, crop: int = 224, n_crops: int = 25, seed: int = 0) -> ScorePrediction:
    """Mean predicted score over ``n_crops`` seeded random crops.

    Crops are scored one at a time so each per-crop value is independent of
    batching; the mean uses exactly-rounded summation, so it does not depend
    on the order crops are reduced in.
    """
    if n_crops < 1:
        raise PredictorError("n_crops must be >= 1")
    modes = encoder.training, predictor.training
    encoder.eval(), predictor.eval()
    try:
        scores = [float(guided_score(encoder, predictor, c)[0]) for c in random_crops(np.asarray(image), crop, n_crops, seed)]
    finally:
        encoder.train(modes[0]), predictor.train(modes[1])
    return ScorePrediction(math.fsum(scores) / len(scores), scores, len(scores))
