"""Restoration assistance: a guided encoder-decoder restorer and its losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .dre import N_STAGES, Encoder, ReservedFeatures, split_representation


class RestorationError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_mse_score: float = 1.0
    w_infonce: float = 0.1
    w_restoration: float = 0.1
    lambda_perceptual: float = 0.01
    w_rs: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise RestorationError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class RestorationOutput:
    restored: torch.Tensor
    guidance_trace: list[dict] = field(default_factory=list)


class LayerNorm2d(nn.GroupNorm):
    def __init__(self, ch: int):
        super().__init__(1, ch)


class GatedBlock(nn.Module):
    """Simplified NAFNet block: depthwise conv with a multiplicative gate."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = LayerNorm2d(ch)
        self.expand = nn.Conv2d(ch, 2 * ch, 1)
        self.dw = nn.Conv2d(2 * ch, 2 * ch, 3, padding=1, groups=2 * ch)
        self.out = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        a, b = self.dw(self.expand(self.norm(x))).chunk(2, dim=1)
        return x + self.out(a * b)


class Modulation(nn.Module):
    """Per-channel ``h * (1 + gamma(u)) + beta(u)``; starts as the identity."""

    def __init__(self, cond_dim: int, ch: int):
        super().__init__()
        self.gamma = nn.Linear(cond_dim, ch)
        self.beta = nn.Linear(cond_dim, ch)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, h, u):
        scale = 1 + self.gamma(u)[:, :, None, None]
        shift = self.beta(u)[:, :, None, None]
        return h * scale + shift


class Restorer(nn.Module):
    """Five-scale encoder-decoder with skips.

    Each encoder and decoder level at scale ``1/2**(k+1)`` can take the
    matching reserved extractor feature (concatenated, realised as an added
    bias-free 1x1 projection) and a channel-wise affine modulation predicted
    from the pooled degradation half.
    """

    def __init__(self, reserved_channels: Sequence[int], cond_dim: int, widths: Sequence[int] = (16, 32, 48, 64, 64, 64)):
        super().__init__()
        if len(reserved_channels) != N_STAGES or len(widths) != N_STAGES + 1:
            raise RestorationError(f"restorer has {N_STAGES} guided scales")
        self.reserved_channels = tuple(reserved_channels)
        self.cond_dim = cond_dim
        w = widths
        self.intro = nn.Conv2d(3, w[0], 3, padding=1)
        self.down = nn.ModuleList(nn.Conv2d(w[k], w[k + 1], 2, stride=2) for k in range(N_STAGES))
        self.enc = nn.ModuleList(GatedBlock(w[k + 1]) for k in range(N_STAGES))
        self.dec = nn.ModuleList(GatedBlock(w[k + 1]) for k in range(N_STAGES))
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(w[k + 1], w[k] * 4, 1, bias=False), nn.PixelShuffle(2)) for k in range(N_STAGES)
        )
        self.enc_feat = nn.ModuleList(nn.Conv2d(c, w[k + 1], 1, bias=False) for k, c in enumerate(reserved_channels))
        self.dec_feat = nn.ModuleList(nn.Conv2d(c, w[k + 1], 1, bias=False) for k, c in enumerate(reserved_channels))
        self.enc_mod = nn.ModuleList(Modulation(cond_dim, w[k + 1]) for k in range(N_STAGES))
        self.dec_mod = nn.ModuleList(Modulation(cond_dim, w[k + 1]) for k in range(N_STAGES))
        self.ending = nn.Conv2d(w[0], 3, 3, padding=1)
        # untrained restorer is the identity map and ignores its guidance
        for conv in (*self.enc_feat, *self.dec_feat):
            nn.init.zeros_(conv.weight)
        nn.init.zeros_(self.ending.weight)
        nn.init.zeros_(self.ending.bias)

    def guidance_modules(self):
        return [*self.enc_feat, *self.dec_feat, *self.enc_mod, *self.dec_mod]

    def _guide(self, h, k, feat, mod, upper, reserved, trace, where):
        if reserved is not None:
            r = reserved[k]
            if r.shape[-2:] != h.shape[-2:]:
                raise RestorationError(
                    f"reserved stage {k} is {tuple(r.shape[-2:])}, restorer scale is {tuple(h.shape[-2:])}"
                )
            h = h + feat[k](r)
        if upper is not None:
            h = mod[k](h, upper)
        trace.append({"stage": k, "path": where, "scale": tuple(h.shape[-2:]),
                      "reserved": reserved is not None, "modulated": upper is not None})
        return h

    def forward(self, x, upper=None, reserved: ReservedFeatures | None = None, trace: list | None = None):
        h, w = x.shape[-2:]
        if h % 2**N_STAGES or w % 2**N_STAGES:
            raise RestorationError(f"restorer input sides must be multiples of {2 ** N_STAGES}, got {(h, w)}")
        if reserved is not None and len(reserved) != N_STAGES:
            raise RestorationError(f"expected {N_STAGES} reserved stages, got {len(reserved)}")
        trace = [] if trace is None else trace
        feats = self.intro(x)
        skips = [feats]
        for k in range(N_STAGES):
            feats = self.down[k](skips[-1])
            feats = self._guide(feats, k, self.enc_feat, self.enc_mod, upper, reserved, trace, "encoder")
            skips.append(self.enc[k](feats))
        feats = skips.pop()
        for k in reversed(range(N_STAGES)):
            feats = self._guide(feats, k, self.dec_feat, self.dec_mod, upper, reserved, trace, "decoder")
            feats = self.up[k](self.dec[k](feats)) + skips.pop()
        return (x + self.ending(feats)).clamp(0.0, 1.0)


def build_restorer(encoder: Encoder, widths=(16, 32, 48, 64, 64, 64)) -> Restorer:
    return Restorer(encoder.stage_channels, encoder.dim // 2, widths)


def restore(restorer: Restorer, x, upper_rep, reserved: ReservedFeatures) -> RestorationOutput:
    """Guided restoration of a ``(N, 3, H, W)`` batch."""
    if len(reserved) != N_STAGES:
        raise RestorationError(f"expected {N_STAGES} reserved stages, got {len(reserved)}")
    if upper_rep.ndim == 1:
        upper_rep = upper_rep[None]
    trace: list[dict] = []
    out = restorer(x, upper_rep, reserved, trace)
    return RestorationOutput(out, trace)


class PerceptualProxy(nn.Module):
    """Frozen random 3-stage conv feature extractor standing in for VGG.

    Weights are buffers drawn from a pinned seed, so the distance is a fixed
    deterministic function of the pixels.
    """

    def __init__(self, widths=(16, 32, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        cin = 3
        for i, c in enumerate(widths):
            w = torch.randn(c, cin, 3, 3, generator=g) * (2.0 / (cin * 9)) ** 0.5
            self.register_buffer(f"w{i}", w)
            cin = c
        self.n = len(widths)

    def features(self, x):
        out = []
        for i in range(self.n):
            w = getattr(self, f"w{i}").to(x.dtype)
            x = F.gelu(F.conv2d(x, w, padding=1))
            out.append(x)
            if i < self.n - 1 and min(x.shape[-2:]) >= 2:
                x = F.avg_pool2d(x, 2)
        return out

    def forward(self, a, b):
        return sum(F.mse_loss(fa, fb) for fa, fb in zip(self.features(a), self.features(b)))


_PROXY: PerceptualProxy | None = None


def perceptual_proxy() -> PerceptualProxy:
    global _PROXY
    if _PROXY is None:
        _PROXY = PerceptualProxy()
    return _PROXY


def restoration_loss(
    x_r,
    ref,
    lam: float = 0.01,
    perceptual: Callable | None = None,
    reduction: str = "mean",
):
    """Pixel L2 plus ``lam`` times a feature-space distance.

    ``perceptual`` may be any ``(a, b) -> scalar`` callable, e.g. a VGG loss.
    """
    if x_r.shape != ref.shape:
        raise RestorationError(f"shape mismatch: {tuple(x_r.shape)} vs {tuple(ref.shape)}")
    pixel = F.mse_loss(x_r, ref, reduction=reduction)
    if lam == 0:
        return pixel
    perceptual = perceptual or perceptual_proxy()
    return pixel + lam * perceptual(x_r, ref)


def freeze(encoder: Encoder) -> Encoder:
    """Detached copy for the semantic block: no grads, never updated."""
    import copy

    frozen = copy.deepcopy(encoder).eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def rs_loss(x_r, ref, frozen_dre: Encoder):
    """Mean squared gap between the degradation halves the frozen extractor
    assigns to the restored image and to its reference."""
    if x_r.shape != ref.shape:
        raise RestorationError(f"shape mismatch: {tuple(x_r.shape)} vs {tuple(ref.shape)}")
    up_res = split_representation(frozen_dre.pooled(x_r))[0]
    up_ref = split_representation(frozen_dre.pooled(ref))[0]
    return F.mse_loss(up_res, up_ref)
