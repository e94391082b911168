"""Dual-representation extractor.

One convolutional encoder maps an image to a ``D``-channel representation.
The first ``D/2`` channels are trained to be degradation-aware, the last
``D/2`` quality-aware; the split is purely positional.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

N_STAGES = 5


class RepresentationError(ValueError):
    pass


@dataclass
class DualRepresentation:
    """Pooled ``D``-vector(s); ``upper``/``lower`` are views, not copies."""

    vector: torch.Tensor

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]

    @property
    def upper(self) -> torch.Tensor:
        return split_representation(self.vector)[0]

    @property
    def lower(self) -> torch.Tensor:
        return split_representation(self.vector)[1]


@dataclass
class ReservedFeatures:
    stages: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.stages) != N_STAGES:
            raise RepresentationError(f"expected {N_STAGES} reserved stages, got {len(self.stages)}")
        sizes = [tuple(s.shape[-2:]) for s in self.stages]
        for a, b in zip(sizes, sizes[1:]):
            if b[0] > a[0] or b[1] > a[1]:
                raise RepresentationError(f"reserved spatial sizes must not increase: {sizes}")

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]


def split_representation(rep):
    """Positional split along the last axis (channel axis 1 for 4-d maps)."""
    axis = 1 if getattr(rep, "ndim", 1) == 4 else -1
    d = rep.shape[axis]
    if d % 2:
        raise RepresentationError(f"representation dimension must be even, got {d}")
    if isinstance(rep, torch.Tensor):
        return rep.narrow(axis, 0, d // 2), rep.narrow(axis, d // 2, d // 2)
    rep = np.asarray(rep)
    return np.split(rep, 2, axis=axis)


def _groups(ch: int) -> int:
    # at least 4 channels per group, so 1x1 maps do not normalise to zero
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 4:
            return g
    return 1


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(_groups(ch), ch)
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "none":
        return nn.Identity()
    raise RepresentationError(f"unknown encoder norm {kind!r}")


class _Stage(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            _norm(norm, cout),
            nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(norm, cout),
            nn.GELU(),
        )

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    """Five stride-2 stages, then a 1x1 projection to ``dim`` channels.

    ``forward`` returns the spatial dual map ``(N, dim, h, w)`` and the five
    pre-projection stage outputs.  The pooled representation is the spatial
    mean of the dual map.
    """

    def __init__(self, dim: int = 128, widths: Sequence[int] = (16, 32, 64, 128), min_size: int = 64, norm: str = "batch"):
        super().__init__()
        if dim <= 0 or dim % 2:
            raise RepresentationError(f"representation dimension must be a positive even number, got {dim}")
        if len(widths) != N_STAGES - 1:
            raise RepresentationError(f"need {N_STAGES - 1} stage widths before the final stage")
        self.dim = dim
        self.min_size = min_size
        chans = (3, *widths, dim)
        self.stages = nn.ModuleList(_Stage(a, b, norm) for a, b in zip(chans, chans[1:]))
        self.project = nn.Conv2d(dim, dim, 1)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(s.body[0].out_channels for s in self.stages)

    def forward(self, x: torch.Tensor):
        if x.shape[-1] < self.min_size or x.shape[-2] < self.min_size:
            raise RepresentationError(
                f"image is {tuple(x.shape[-2:])}, encoder needs at least {self.min_size}x{self.min_size}"
            )
        reserved = []
        for stage in self.stages:
            x = stage(x)
            reserved.append(x)
        return self.project(x), ReservedFeatures(tuple(reserved))

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[0].mean(dim=(2, 3))


def to_tensor(image) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` float tensor; batches pass through."""
    if isinstance(image, torch.Tensor):
        return image if image.ndim == 4 else image.unsqueeze(0)
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def encode(encoder: Encoder, image) -> tuple[DualRepresentation, ReservedFeatures]:
    """Inference-mode encoding of one image (or a batch)."""
    was_training = encoder.training
    encoder.eval()
    try:
        x = to_tensor(image).to(next(encoder.parameters()).dtype)
        dual_map, reserved = encoder(x)
    finally:
        encoder.train(was_training)
    vec = dual_map.mean(dim=(2, 3))
    if vec.shape[0] == 1:
        vec = vec[0]
    return DualRepresentation(vec), reserved


# -- contrastive sampling ------------------------------------------------------


class Patch(NamedTuple):
    source: int  # clean image id
    recipe: int  # degraded view id, unique per (source, view)
    crop: int


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negatives: tuple[int, ...]


@dataclass(frozen=True)
class ContrastiveBatch:
    patches: tuple[Patch, ...]
    degradation: tuple[Triplet, ...]
    quality: tuple[Triplet, ...]

    @property
    def n_patches(self) -> int:
        return len(self.patches)


def standard_layout(n_sources: int) -> list[Patch]:
    """Patch order used by the trainer: per source ``x11, x12, x21, x22``."""
    return [Patch(s, 2 * s + v, c) for s in range(n_sources) for v in range(2) for c in range(2)]


def build_contrastive_batch(patches: Sequence[Patch]) -> ContrastiveBatch:
    """Pick positives and negatives for both halves.

    Every first crop of a degraded view is an anchor; its sibling crop is
    the positive.  Degradation-half negatives differ from the anchor in both
    content and recipe.  Quality-half negatives add the patches that share
    the anchor's content but not its recipe.
    """
    patches = tuple(Patch(*p) for p in patches)
    if len({p.source for p in patches}) < 2:
        raise RepresentationError("contrastive batch needs at least 2 distinct source images")
    by_recipe: dict[int, list[int]] = {}
    for i, p in enumerate(patches):
        by_recipe.setdefault(p.recipe, []).append(i)
    for r, idx in by_recipe.items():
        if len(idx) != 2 or len({patches[i].source for i in idx}) != 1:
            raise RepresentationError(f"recipe {r} must own exactly two crops of one source image")
    deg, qual = [], []
    for r, (a, pos) in by_recipe.items():
        src = patches[a].source
        cross = tuple(i for i, p in enumerate(patches) if p.source != src and p.recipe != r)
        same_content = tuple(i for i, p in enumerate(patches) if p.source == src and p.recipe != r)
        deg.append(Triplet(a, pos, cross))
        qual.append(Triplet(a, pos, cross + same_content))
    return ContrastiveBatch(patches, tuple(deg), tuple(qual))


# -- losses --------------------------------------------------------------------


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise RepresentationError("zero vector has no cosine similarity")
    return x / norms


def info_nce(anchor, positive, negatives, temperature: float = 0.07) -> torch.Tensor:
    """Cosine-similarity InfoNCE, averaged over anchors.

    Shapes: ``anchor``/``positive`` ``(d,)`` or ``(A, d)``; ``negatives``
    ``(K, d)`` or ``(A, K, d)``.
    """
    if temperature <= 0:
        raise RepresentationError(f"temperature must be positive, got {temperature}")
    a, p, n = (torch.as_tensor(t) for t in (anchor, positive, negatives))
    if a.ndim == 1:
        a, p, n = a[None], p[None], n[None]
    if n.shape[-2] < 1:
        raise RepresentationError("info_nce needs at least one negative")
    if not (a.shape[-1] == p.shape[-1] == n.shape[-1]):
        raise RepresentationError("anchor, positive and negatives must share a dimension")
    a, p, n = _normalize(a), _normalize(p), _normalize(n)
    pos = (a * p).sum(-1, keepdim=True)
    neg = torch.einsum("ad,akd->ak", a, n)
    logits = torch.cat([pos, neg], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def _half_loss(q: torch.Tensor, k: torch.Tensor, triplets, temperature):
    idx = torch.tensor([t.anchor for t in triplets])
    pos = torch.tensor([t.positive for t in triplets])
    neg = torch.tensor([t.negatives for t in triplets])
    return info_nce(q[idx], k[pos], k[neg], temperature)


def dual_contrastive_loss(reps: torch.Tensor, batch: ContrastiveBatch, temperature: float = 0.07, keys=None):
    """Per-half InfoNCE over a batch of pooled ``(N, D)`` representations.

    ``keys`` optionally supplies positives/negatives from a momentum encoder.
    Returns ``(loss_degradation, loss_quality, total)``.
    """
    if reps.shape[0] != batch.n_patches:
        raise RepresentationError(f"{reps.shape[0]} representations for {batch.n_patches} patches")
    keys = reps if keys is None else keys
    q_up, q_lo = split_representation(reps)
    k_up, k_lo = split_representation(keys)
    loss_d = _half_loss(q_up, k_up, batch.degradation, temperature)
    loss_q = _half_loss(q_lo, k_lo, batch.quality, temperature)
    return loss_d, loss_q, (loss_d + loss_q) / 2


# -- probing -------------------------------------------------------------------


@torch.no_grad()
def pooled_features(encoder: Encoder, images, batch_size: int = 64) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            x = to_tensor(np.stack(images[i : i + batch_size]))
            out.append(encoder.pooled(x).double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out)


def linear_probe(encoder: Encoder, images, labels, seed: int = 0, test_fraction: float = 0.5) -> dict:
    """Held-out accuracy of a linear classifier on each half of a frozen encoder."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise RepresentationError("linear probe needs at least two classes")
    feats = pooled_features(encoder, list(images))
    upper, lower = split_representation(feats)
    idx_train, idx_test = train_test_split(
        np.arange(len(labels)), test_size=test_fraction, random_state=seed, stratify=labels
    )
    result = {}
    for name, x in (("upper", upper), ("lower", lower)):
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        clf.fit(x[idx_train], labels[idx_train])
        result[name] = float(clf.score(x[idx_test], labels[idx_test]))
    return result
