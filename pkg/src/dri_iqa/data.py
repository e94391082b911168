"""Image IO, dataset manifests and the procedural toy corpus."""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import Palette, apply_recipe, default_palette, derive_seed, sample_recipe, severity_index

CACHE_ENV = "DRI_IQA_CACHE"


@dataclass(frozen=True)
class ManifestRow:
    path: str
    mos: float
    ref_path: str | None = None


def load_image(path) -> np.ndarray:
    """Read an image as float32 ``(H, W, 3)`` in ``[0, 1]``.

    Decoded arrays are memoised as ``.npy`` under ``$DRI_IQA_CACHE`` when set.
    """
    path = Path(path)
    cache = os.environ.get(CACHE_ENV)
    if cache:
        st = path.stat()
        key = hashlib.sha1(f"{path.resolve()}:{st.st_mtime_ns}:{st.st_size}".encode()).hexdigest()
        cached = Path(cache) / f"{key}.npy"
        if cached.exists():
            return np.load(cached)
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        np.save(cached, arr)
    return arr


def save_image(image: np.ndarray, path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit, exactly as ``save_image``/``load_image`` would."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "mos"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest header must be path,mos[,ref_path]")
        for rec in reader:
            ref = rec.get("ref_path") or None
            rows.append(
                ManifestRow(
                    path=str(_resolve(path.parent, rec["path"])),
                    mos=float(rec["mos"]),
                    ref_path=str(_resolve(path.parent, ref)) if ref else None,
                )
            )
    return rows


def write_manifest(rows, path) -> None:
    path = Path(path)
    with_ref = any(r.ref_path for r in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "mos", "ref_path"] if with_ref else ["path", "mos"])
        for r in rows:
            rec = [_relative(path.parent, r.path), repr(float(r.mos))]
            if with_ref:
                rec.append(_relative(path.parent, r.ref_path) if r.ref_path else "")
            writer.writerow(rec)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _relative(base: Path, p: str) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def dead_leaves(size: int = 96, seed: int = 0, n_leaves: int = 120) -> np.ndarray:
    """Occluding random disks with power-law radii, each filled with a flat,
    graded or striped texture.  Scale-invariant statistics make it a
    reasonable stand-in for natural photographs at toy scale."""
    g = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.empty((h, w, 3), np.float32)
    img[:] = g.random(3, dtype=np.float32)
    rmin, rmax = 3.0, size / 2.0
    # inverse-CDF sampling of p(r) ~ r^-3 on [rmin, rmax]
    u = g.random(n_leaves)
    radii = 1.0 / np.sqrt(1.0 / rmin**2 - u * (1.0 / rmin**2 - 1.0 / rmax**2))
    for r in np.sort(radii)[::-1]:
        cy, cx = g.uniform(-r, h + r), g.uniform(-r, w + r)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        if not mask.any():
            continue
        base = _leaf_colour(g)
        style = g.integers(3)
        if style == 0:
            img[mask] = base
        else:
            theta = g.uniform(0, np.pi)
            proj = np.cos(theta) * (xx[mask] - cx) + np.sin(theta) * (yy[mask] - cy)
            if style == 1:
                t = proj / (2 * r)
            else:
                t = 0.5 * np.sin(2 * np.pi * proj / g.uniform(2.5, 8.0))
            other = _leaf_colour(g)
            img[mask] = np.clip(base + np.outer(t, other - base) * 0.8, 0, 1)
    return img


def _leaf_colour(g) -> np.ndarray:
    # muted palette: random grey level pulled partway toward a random hue
    grey = g.uniform(0.1, 0.9)
    hue = g.random(3)
    return np.clip(grey + g.uniform(0.1, 0.6) * (hue - hue.mean()), 0, 1).astype(np.float32)


def toy_corpus(n: int, size: int = 96, seed: int = 0) -> list[np.ndarray]:
    return [quantize(dead_leaves(size, derive_seed(seed, 7, i))) for i in range(n)]


def toy_mos(recipe, top: float = 5.0, cap: float = 4.0) -> float:
    """Synthetic opinion score: ``top - min(severity_index, cap)``."""
    return top - min(severity_index(recipe), cap)


def synthesize_iqa_dataset(
    out_dir,
    n_refs: int = 20,
    per_ref: int = 10,
    size: int = 96,
    seed: int = 0,
    palette: Palette | None = None,
) -> Path:
    """Write a KADID-style toy dataset (clean refs, degraded images, manifest.csv).

    MOS is a clamped decreasing function of each image's severity index.
    """
    out_dir = Path(out_dir)
    (out_dir / "ref").mkdir(parents=True, exist_ok=True)
    (out_dir / "dist").mkdir(parents=True, exist_ok=True)
    palette = palette or default_palette()
    rows = []
    for i, clean in enumerate(toy_corpus(n_refs, size, seed)):
        ref_path = out_dir / "ref" / f"ref{i:03d}.png"
        save_image(clean, ref_path)
        for j in range(per_ref):
            recipe = sample_recipe(palette, derive_seed(seed, 11, i, j))
            dist_path = out_dir / "dist" / f"ref{i:03d}_d{j:02d}.png"
            save_image(apply_recipe(clean, recipe, palette), dist_path)
            rows.append(ManifestRow(str(dist_path), toy_mos(recipe), str(ref_path)))
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest
