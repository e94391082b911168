"""Randomized hybrid degradation synthesis.

A clean image is pushed through an ordered chain of parameterized
degradations (blur, noise, JPEG, resize round trip, saturation and
contrast shifts).  Every random draw comes from a counter-based Philox
stream keyed by ``(seed, step index, kind)``, so a recipe replays
bit-for-bit on the same machine regardless of call order.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import PIL
import PIL.features
from PIL import Image
from scipy import ndimage

KINDS = (
    "gaussian_blur",
    "gaussian_noise",
    "jpeg_compression",
    "resize_rescale",
    "saturation_shift",
    "contrast_change",
)
MAX_STEPS = 6

# physical range per kind, mild end first
DEFAULT_RANGES = {
    "gaussian_blur": (0.5, 4.0),
    "gaussian_noise": (0.01, 0.15),
    "jpeg_compression": (70.0, 10.0),
    "resize_rescale": (0.9, 0.25),
    "saturation_shift": (0.0, 0.6),
    "contrast_change": (0.0, 0.5),
}
# kinds whose physical parameter is a deviation around 1 that may go either way
_SIGNED_KINDS = ("saturation_shift", "contrast_change")

# Rec. 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# stream tags so selection/severity draws and noise realisations never overlap
_TAG_SAMPLE = 0
_TAG_APPLY = 1
_TAG_ORDER = 2


class DegradationError(ValueError):
    pass


def codec_provenance() -> dict:
    """Identify the JPEG codec in use; bit-exactness only holds within one."""
    return {"pillow": PIL.__version__, "libjpeg": PIL.features.version("jpg")}


def _stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class PaletteEntry:
    kind: str
    low: float
    high: float
    selection_probability: float = 0.5

    def physical(self, severity: float) -> float:
        return self.low + severity * (self.high - self.low)


@dataclass(frozen=True)
class Palette:
    entries: tuple[PaletteEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(e.kind for e in self.entries)

    def entry(self, kind: str) -> PaletteEntry:
        for e in self.entries:
            if e.kind == kind:
                return e
        raise DegradationError(f"kind {kind!r} is not in the palette")

    def to_json(self) -> list[dict]:
        return [asdict(e) for e in self.entries]

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class DegradationOp:
    kind: str
    severity: float
    selection_probability: float
    # +1 / -1: direction of the deviation for saturation and contrast; ignored otherwise
    direction: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DegradationError(f"unknown degradation kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise DegradationError(f"severity {self.severity} outside [0, 1]")
        if not 0.0 <= self.selection_probability <= 1.0:
            raise DegradationError(f"selection_probability {self.selection_probability} outside [0, 1]")
        if self.direction not in (-1, 1):
            raise DegradationError("direction must be +1 or -1")


@dataclass(frozen=True)
class DegradationRecipe:
    steps: tuple[DegradationOp, ...] = ()
    seed: int = 0
    palette: Palette | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.steps) > MAX_STEPS:
            raise DegradationError(f"recipe has {len(self.steps)} steps, at most {MAX_STEPS} allowed")

    def __len__(self) -> int:
        return len(self.steps)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "steps": [asdict(s) for s in self.steps],
        }

    @classmethod
    def from_json(cls, data: dict, palette: Palette | None = None) -> "DegradationRecipe":
        steps = tuple(DegradationOp(**s) for s in data["steps"])
        return cls(steps=steps, seed=int(data["seed"]), palette=palette)


def register_palette(ops: Iterable[PaletteEntry | tuple | dict]) -> Palette:
    """Build a frozen palette from ``(kind, low, high[, probability])`` entries."""
    entries = []
    for op in ops:
        if isinstance(op, PaletteEntry):
            entries.append(op)
        elif isinstance(op, dict):
            entries.append(PaletteEntry(**op))
        else:
            entries.append(PaletteEntry(*op))
    if not entries:
        raise DegradationError("palette must contain at least one degradation")
    seen = set()
    for e in entries:
        if e.kind not in KINDS:
            raise DegradationError(f"unknown degradation kind {e.kind!r}")
        if e.kind in seen:
            raise DegradationError(f"duplicate kind {e.kind!r} in palette")
        if not 0.0 <= e.selection_probability <= 1.0:
            raise DegradationError(f"selection_probability for {e.kind} outside [0, 1]")
        seen.add(e.kind)
    return Palette(tuple(entries))


def default_palette(selection_probability: float = 0.5) -> Palette:
    return register_palette(
        PaletteEntry(k, *DEFAULT_RANGES[k], selection_probability) for k in KINDS
    )


def load_palette(path) -> Palette:
    """Read a palette from a JSON/YAML list of ``{kind, low, high, selection_probability}``."""
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, list):
        raise DegradationError(f"{path}: palette file must hold a list of entries")
    return register_palette(data)


def sample_recipe(palette: Palette, rng_seed: int, max_steps: int = MAX_STEPS) -> DegradationRecipe:
    """Draw a random degradation chain.

    Candidate step ``i`` uses kind ``order[i % len(palette)]`` where
    ``order`` is a seeded permutation of the palette; each candidate is
    kept with its selection probability and gets a uniform severity.
    """
    if not 0 <= max_steps <= MAX_STEPS:
        raise DegradationError(f"max_steps must be in [0, {MAX_STEPS}], got {max_steps}")
    order = _stream(rng_seed, _TAG_ORDER).permutation(len(palette))
    steps = []
    for i in range(max_steps):
        entry = palette.entries[order[i % len(palette)]]
        g = _stream(rng_seed, _TAG_SAMPLE, i, KINDS.index(entry.kind))
        keep, severity, sign = g.random(3)
        if keep < entry.selection_probability:
            steps.append(
                DegradationOp(
                    kind=entry.kind,
                    severity=float(severity),
                    selection_probability=entry.selection_probability,
                    direction=-1 if entry.kind in _SIGNED_KINDS and sign >= 0.5 else 1,
                )
            )
    return DegradationRecipe(tuple(steps), seed=int(rng_seed), palette=palette)


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DegradationError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DegradationError("image contains non-finite pixels")
    return image.astype(np.float32, copy=False)


def _blur(x, sigma):
    # filter the zero-mean residual so flat regions stay exactly flat
    mean = x.mean(axis=(0, 1), keepdims=True, dtype=np.float64).astype(np.float32)
    out = ndimage.gaussian_filter(x - mean, sigma=(sigma, sigma, 0), mode="reflect")
    return out + mean


def _noise(x, sigma, g):
    return x + g.normal(0.0, sigma, size=x.shape).astype(np.float32)


def _jpeg(x, quality):
    img = Image.fromarray(np.round(np.clip(x, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(round(quality)))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0


def _resize(x, factor):
    h, w = x.shape[:2]
    sh, sw = max(1, round(h * factor)), max(1, round(w * factor))
    chans = []
    for c in range(3):
        band = Image.fromarray(np.ascontiguousarray(x[:, :, c]))
        small = band.resize((sw, sh), Image.Resampling.BILINEAR, reducing_gap=None)
        chans.append(np.asarray(small.resize((w, h), Image.Resampling.BICUBIC), dtype=np.float32))
    return np.stack(chans, axis=2)


def _saturation(x, scale):
    gray = (x @ _LUMA)[:, :, None]
    return gray + scale * (x - gray)


def _contrast(x, scale):
    mean = np.float32((x @ _LUMA).mean())
    return mean + scale * (x - mean)


def _apply_op(x: np.ndarray, op: DegradationOp, entry: PaletteEntry, g: np.random.Generator) -> np.ndarray:
    p = entry.physical(op.severity)
    if op.kind == "gaussian_blur":
        return _blur(x, p)
    if op.kind == "gaussian_noise":
        return _noise(x, p, g)
    if op.kind == "jpeg_compression":
        return _jpeg(x, p)
    if op.kind == "resize_rescale":
        return _resize(x, p)
    if op.kind == "saturation_shift":
        return _saturation(x, 1.0 + op.direction * p)
    if op.kind == "contrast_change":
        return _contrast(x, 1.0 + op.direction * p)
    raise DegradationError(f"unknown degradation kind {op.kind!r}")


def apply_recipe(image: np.ndarray, recipe: DegradationRecipe, palette: Palette | None = None) -> np.ndarray:
    """Run every step of ``recipe`` over ``image``; an empty recipe returns a copy."""
    x = validate_image(image).copy()
    palette = palette or recipe.palette or default_palette()
    for i, op in enumerate(recipe.steps):
        entry = palette.entry(op.kind)
        g = _stream(recipe.seed, _TAG_APPLY, i, KINDS.index(op.kind))
        x = np.clip(_apply_op(x, op, entry, g), 0.0, 1.0).astype(np.float32, copy=False)
    return x


def derive_seed(seed: int, *key: int) -> int:
    """Independent 63-bit seed for a sub-stream of ``seed``."""
    return int(np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(1, np.uint64)[0] >> 1)


def make_contrastive_pair(clean: np.ndarray, seed: int, palette: Palette | None = None):
    """Degrade one clean image twice with independent recipes.

    Returns ``(x1, x2, recipe1, recipe2)``.
    """
    palette = palette or default_palette()
    clean = validate_image(clean)
    r1 = sample_recipe(palette, derive_seed(seed, 1))
    r2 = sample_recipe(palette, derive_seed(seed, 2))
    return apply_recipe(clean, r1, palette), apply_recipe(clean, r2, palette), r1, r2


def severity_index(recipe: DegradationRecipe | Sequence[DegradationOp]) -> float:
    steps = recipe.steps if isinstance(recipe, DegradationRecipe) else recipe
    return float(sum(op.severity for op in steps))
