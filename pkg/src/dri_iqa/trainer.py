"""Two-stage training: contrastive pretraining of the extractor, then joint
score regression with optional restoration branch and semantic loss."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, from_dict
from .data import ManifestRow, load_image
from .degrade import Palette, default_palette, derive_seed, load_palette, make_contrastive_pair, sample_recipe
from .dre import N_STAGES, Encoder, build_contrastive_batch, dual_contrastive_loss, split_representation, standard_layout, to_tensor
from .predictor import Predictor, predict_mos
from .ram import Restorer, build_restorer, freeze, restoration_loss, rs_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGE1_TERMS = ("loss_degradation", "loss_quality", "total")
STAGE2_TERMS = ("mse", "infonce", "restoration", "rs", "total")

# sub-stream tags for derive_seed
_PAIR, _CROP, _SHUFFLE, _INIT = 101, 102, 103, 104


class TrainingError(ValueError):
    pass


def set_global_seed(seed: int) -> None:
    """Seed every global generator and pin deterministic kernels.

    Training itself draws from streams derived from the config seed, so
    this only guards code paths that fall back on global state.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def cosine_lr(epoch: int, lr: float, eta_min: float, t_max: float) -> float:
    return eta_min + (lr - eta_min) * (1 + math.cos(math.pi * epoch / t_max)) / 2


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- models and checkpoints ------------------------------------------------------


class DRIModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.encoder = Encoder(cfg.dim, cfg.encoder_widths, min_size=min(64, cfg.crop), norm=cfg.encoder_norm)
        self.predictor = Predictor(
            cfg.dim, cfg.width, cfg.n_guidance, cfg.n_transformer, cfg.heads,
            cfg.attention, cfg.positional, cfg.quality_channels,
        )
        self.restorer = build_restorer(self.encoder, cfg.restorer_widths)

    def score(self, x):
        dual_map, _ = self.encoder(x)
        return self.predictor(x, dual_map)

    def restore(self, x):
        """Guided restoration; any side length, reflect-padded to the restorer's stride."""
        h, w = x.shape[-2:]
        m = 2**N_STAGES
        padded = F.pad(x, (0, -w % m, 0, -h % m), mode="reflect") if (h % m or w % m) else x
        dual_map, reserved = self.encoder(padded)
        upper = split_representation(dual_map.mean(dim=(2, 3)))[0]
        return self.restorer(padded, upper, reserved)[..., :h, :w]


def build_model(cfg: TrainConfig) -> DRIModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, _INIT))
        return DRIModel(cfg)


@dataclass
class Checkpoint:
    stage: int
    config: dict
    weights: dict
    palette_hash: str
    epoch: int
    rng_state: dict = field(default_factory=dict)
    optimizer: dict | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return from_dict(self.config)

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def model(self) -> DRIModel:
        model = build_model(self.train_config)
        for name, sd in self.weights.items():
            if name in ("encoder", "predictor", "restorer"):
                getattr(model, name).load_state_dict(sd)
        return model.eval()

    def frozen_encoder(self) -> Encoder | None:
        if "rs_encoder" not in self.weights:
            return None
        cfg = self.train_config
        enc = Encoder(cfg.dim, cfg.encoder_widths, min_size=min(64, cfg.crop), norm=cfg.encoder_norm)
        enc.load_state_dict(self.weights["rs_encoder"])
        return freeze(enc)

    def save(self, path) -> Path:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": self.version, "stage": self.stage, "config": self.config, "weights": self.weights,
            "palette_hash": self.palette_hash, "epoch": self.epoch, "rng_state": self.rng_state,
            "optimizer": self.optimizer, "dim": self.config["dim"], "temperature": self.config["temperature"],
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                torch.save(payload, fh)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return path

    @classmethod
    def load(cls, path, expect_dim: int | None = None) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(payload, dict) or "version" not in payload:
            raise TrainingError(f"{path}: not a versioned checkpoint")
        if payload["version"] != CHECKPOINT_VERSION:
            raise TrainingError(f"{path}: checkpoint version {payload['version']}, expected {CHECKPOINT_VERSION}")
        if expect_dim is not None and payload["dim"] != expect_dim:
            raise TrainingError(f"{path}: representation dimension {payload['dim']} != configured {expect_dim}")
        return cls(
            stage=payload["stage"], config=payload["config"], weights=payload["weights"],
            palette_hash=payload["palette_hash"], epoch=payload["epoch"], rng_state=payload["rng_state"],
            optimizer=payload.get("optimizer"),
        )


# -- shared helpers -------------------------------------------------------------


def resolve_palette(cfg: TrainConfig) -> Palette:
    return load_palette(cfg.palette) if cfg.palette else default_palette()


def _crop_pair(images, crop: int, seed: int):
    """Same random window from each image in ``images``."""
    h, w = images[0].shape[:2]
    if h < crop or w < crop:
        raise TrainingError(f"image is {h}x{w}, crop size is {crop}")
    g = np.random.default_rng(seed)
    y, x = g.integers(0, h - crop + 1), g.integers(0, w - crop + 1)
    return [im[y : y + crop, x : x + crop] for im in images]


def _two_crops(image, crop: int, seed: int):
    return _crop_pair([image], crop, derive_seed(seed, 0))[0], _crop_pair([image], crop, derive_seed(seed, 1))[0]


def contrastive_views(clean: np.ndarray, crop: int, seed: int, palette: Palette):
    """``[x11, x12, x21, x22]`` crops from two independent degradations of ``clean``."""
    x1, x2, _, _ = make_contrastive_pair(clean, derive_seed(seed, _PAIR), palette)
    return [*_two_crops(x1, crop, derive_seed(seed, _CROP, 1)), *_two_crops(x2, crop, derive_seed(seed, _CROP, 2))]


def pair_seed(seed: int, epoch: int, step: int, item: int) -> int:
    return derive_seed(seed, epoch, step, item)


def recipe_stream(seed: int, n: int, palette: Palette | None = None):
    """First ``n`` recipes the stage-1 pipeline draws for ``seed`` (x1 views)."""
    palette = palette or default_palette()
    out = []
    step = 0
    while len(out) < n:
        ps = derive_seed(pair_seed(seed, 0, step, 0), _PAIR)
        out.append(sample_recipe(palette, derive_seed(ps, 1)))
        step += 1
    return out


class LossLog:
    """One CSV row per optimisation step."""

    def __init__(self, path, terms):
        self.terms = tuple(terms)
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "epoch", "lr", *self.terms])

    def append(self, step, epoch, lr, values: dict):
        row = {"step": step, "epoch": epoch, "lr": lr, **{t: float(values[t]) for t in self.terms}}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, epoch, repr(lr), *(repr(row[t]) for t in self.terms)])

    def column(self, term):
        return [r[term] for r in self.rows]


def _set_lr(opt, cfg: TrainConfig, epoch: int) -> float:
    lr = cosine_lr(epoch, cfg.lr, cfg.eta_min, cfg.t_max)
    for g in opt.param_groups:
        g["lr"] = lr
    return lr


def _rng_state(seed: int) -> dict:
    return {"seed": seed, "torch": torch.get_rng_state()}


# -- stage 1 --------------------------------------------------------------------


def pretrain_stage1(corpus, cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None) -> tuple[Checkpoint, LossLog]:
    """Contrastive pretraining of the extractor on a list of clean images."""
    if cfg.stage != 1:
        raise TrainingError("pretrain_stage1 needs a stage-1 config")
    corpus = [np.asarray(c, dtype=np.float32) for c in corpus]
    if len(corpus) < 2:
        raise TrainingError(f"stage 1 needs at least 2 clean images, got {len(corpus)}")
    batch = min(cfg.batch, len(corpus))
    set_global_seed(cfg.seed)
    palette = resolve_palette(cfg)
    model = build_model(cfg)
    encoder = model.encoder.train()
    key_encoder = None
    if cfg.momentum > 0:
        key_encoder = freeze(encoder)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if resume is not None:
        encoder.load_state_dict(resume.weights["encoder"])
        if key_encoder is not None and "key_encoder" in resume.weights:
            key_encoder.load_state_dict(resume.weights["key_encoder"])
        if resume.optimizer:
            opt.load_state_dict(resume.optimizer)
        start = resume.epoch + 1
        log.info("resuming stage 1 at epoch %d with seed %d", start, resume.seed)
    steps_per_epoch = max(1, len(corpus) * cfg.pairs_per_image // batch)
    layout = build_contrastive_batch(standard_layout(batch))
    losses = LossLog(Path(out_dir) / "loss_stage1.csv" if out_dir else None, STAGE1_TERMS)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    step = start * steps_per_epoch
    try:
        for epoch in range(start, cfg.epochs):
            lr = _set_lr(opt, cfg, epoch)
            order = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE, epoch)).permutation(
                np.resize(np.arange(len(corpus)), len(corpus) * cfg.pairs_per_image)
            )
            for s in range(steps_per_epoch):
                idx = order[s * batch : (s + 1) * batch]
                jobs = [(corpus[i], cfg.crop, pair_seed(cfg.seed, epoch, s, b), palette) for b, i in enumerate(idx)]
                views = list(pool.map(lambda a: contrastive_views(*a), jobs)) if pool else [contrastive_views(*a) for a in jobs]
                x = to_tensor(np.stack([v for vs in views for v in vs]))
                reps = encoder.pooled(x)
                keys = None
                if key_encoder is not None:
                    with torch.no_grad():
                        keys = key_encoder.pooled(x)
                ld, lq, total = dual_contrastive_loss(reps, layout, cfg.temperature, keys)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(encoder.parameters(), cfg.grad_clip)
                opt.step()
                if key_encoder is not None:
                    with torch.no_grad():
                        for pk, pq in zip(key_encoder.parameters(), encoder.parameters()):
                            pk.mul_(cfg.momentum).add_(pq.detach(), alpha=1 - cfg.momentum)
                losses.append(step, epoch, lr, {"loss_degradation": ld.item(), "loss_quality": lq.item(), "total": total.item()})
                step += 1
            log.info("stage 1 epoch %d: loss %.4f", epoch, np.mean(losses.column("total")[-steps_per_epoch:]))
    finally:
        if pool:
            pool.shutdown()
    weights = {"encoder": copy.deepcopy(encoder.state_dict())}
    if key_encoder is not None:
        weights["key_encoder"] = copy.deepcopy(key_encoder.state_dict())
    ckpt = Checkpoint(1, cfg.to_dict(), weights, palette.hash(), cfg.epochs - 1, _rng_state(cfg.seed), opt.state_dict())
    if out_dir:
        ckpt.save(Path(out_dir) / "stage1.pt")
    return ckpt, losses


# -- stage 2 --------------------------------------------------------------------


@dataclass
class Stage2Data:
    images: list
    refs: list
    mos: np.ndarray
    ids: list

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        images = [load_image(r.path) for r in rows]
        refs = [load_image(r.ref_path) if r.ref_path else None for r in rows]
        return cls(images, refs, np.array([r.mos for r in rows], dtype=np.float32), [r.path for r in rows])

    @property
    def has_refs(self) -> bool:
        return all(r is not None for r in self.refs)

    def __len__(self):
        return len(self.images)


def train_stage2(
    rows,
    stage1: Checkpoint,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, LossLog]:
    """Joint training of extractor, predictor and (per ablation) restorer.

    ``rows`` is a list of :class:`ManifestRow` or a prepared :class:`Stage2Data`.
    """
    if cfg.stage != 2:
        raise TrainingError("train_stage2 needs a stage-2 config")
    if stage1.stage != 1:
        raise TrainingError("train_stage2 must start from a stage-1 checkpoint")
    data = rows if isinstance(rows, Stage2Data) else Stage2Data.from_rows(rows)
    if len(data) < 2:
        raise TrainingError("stage 2 needs at least 2 rows")
    ablation = cfg.ablation
    use_restoration = ablation in ("v3", "proposed")
    use_rs = ablation == "proposed"
    use_nce = ablation != "v1"
    if use_restoration and not data.has_refs:
        raise TrainingError(f"ablation {ablation} needs a clean ref_path for every row")
    if use_nce and not data.has_refs:
        log.warning("no clean references available: stage-2 InfoNCE term disabled")
        use_nce = False
    if stage1.config["dim"] != cfg.dim:
        raise TrainingError(f"stage-1 dimension {stage1.config['dim']} != configured {cfg.dim}")

    set_global_seed(cfg.seed)
    palette = resolve_palette(cfg)
    model = build_model(cfg)
    model.encoder.load_state_dict(stage1.weights["encoder"])
    frozen = freeze(model.encoder)
    with torch.no_grad():
        model.predictor.head[-1].bias.fill_(float(data.mos.mean()))
    model.train()
    params = list(model.encoder.parameters()) + list(model.predictor.parameters())
    if use_restoration:
        params += list(model.restorer.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if resume is not None:
        for name in ("encoder", "predictor", "restorer"):
            getattr(model, name).load_state_dict(resume.weights[name])
        frozen.load_state_dict(resume.weights["rs_encoder"])
        if resume.optimizer:
            opt.load_state_dict(resume.optimizer)
        start = resume.epoch + 1
        log.info("resuming stage 2 at epoch %d with seed %d", start, resume.seed)

    batch = min(cfg.batch, len(data))
    steps_per_epoch = max(1, len(data) // batch)
    losses = LossLog(Path(out_dir) / f"loss_stage2_{ablation}.csv" if out_dir else None, STAGE2_TERMS)
    w = cfg.loss_weights
    zero = torch.zeros(())
    step = start * steps_per_epoch
    for epoch in range(start, cfg.epochs):
        lr = _set_lr(opt, cfg, epoch)
        order = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE, epoch)).permutation(len(data))
        for s in range(steps_per_epoch):
            idx = order[s * batch : (s + 1) * batch]
            xs, refs = [], []
            for b, i in enumerate(idx):
                pair = [data.images[i]] + ([data.refs[i]] if data.refs[i] is not None else [])
                crops = _crop_pair(pair, cfg.crop, derive_seed(cfg.seed, _CROP, epoch, s, b))
                xs.append(crops[0])
                refs.append(crops[-1])
            x = to_tensor(np.stack(xs))
            target = torch.from_numpy(data.mos[idx])
            dual_map, reserved = model.encoder(x)
            mse = F.mse_loss(model.predictor(x, dual_map), target)
            terms = {"mse": mse, "infonce": zero, "restoration": zero, "rs": zero}
            if use_nce:
                views = [v for b, i in enumerate(idx)
                         for v in contrastive_views(data.refs[i], cfg.crop, pair_seed(cfg.seed, epoch, s, b), palette)]
                reps = model.encoder.pooled(to_tensor(np.stack(views)))
                terms["infonce"] = dual_contrastive_loss(reps, build_contrastive_batch(standard_layout(len(idx))),
                                                         cfg.temperature)[2]
            if use_restoration:
                ref = to_tensor(np.stack(refs))
                upper = split_representation(dual_map.mean(dim=(2, 3)))[0]
                restored = model.restorer(x, upper, reserved)
                terms["restoration"] = restoration_loss(restored, ref, w.lambda_perceptual,
                                                        reduction=cfg.restoration_reduction)
                if use_rs:
                    terms["rs"] = rs_loss(restored, ref, frozen)
            total = (w.w_mse_score * terms["mse"] + w.w_infonce * terms["infonce"]
                     + w.w_restoration * terms["restoration"] + w.w_rs * terms["rs"])
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(step, epoch, lr, {**{k: v.item() for k, v in terms.items()}, "total": total.item()})
            step += 1
        log.info("stage 2 [%s] epoch %d: loss %.4f", ablation, epoch,
                 np.mean(losses.column("total")[-steps_per_epoch:]))
    model.eval()
    weights = {
        "encoder": copy.deepcopy(model.encoder.state_dict()),
        "predictor": copy.deepcopy(model.predictor.state_dict()),
        "restorer": copy.deepcopy(model.restorer.state_dict()),
        "rs_encoder": copy.deepcopy(frozen.state_dict()),
    }
    ckpt = Checkpoint(2, cfg.to_dict(), weights, palette.hash(), cfg.epochs - 1, _rng_state(cfg.seed), opt.state_dict())
    if out_dir:
        ckpt.save(Path(out_dir) / f"stage2_{ablation}.pt")
    return ckpt, losses


# -- inference helpers ----------------------------------------------------------


def checkpoint_scorer(ckpt: Checkpoint, crop: int | None = None, n_crops: int | None = None, seed: int = 0):
    """``row -> predicted score`` closure over a stage-2 checkpoint."""
    if ckpt.stage != 2:
        raise TrainingError("scoring needs a stage-2 checkpoint")
    cfg = ckpt.train_config
    model = ckpt.model()
    crop = crop or cfg.crop
    n_crops = n_crops or cfg.n_crops

    def score(row) -> float:
        image = load_image(row.path) if isinstance(row, ManifestRow) else row
        return predict_mos(model.encoder, model.predictor, image, crop, n_crops, seed).score

    return score


@torch.no_grad()
def restoration_gain(model: DRIModel, rows) -> dict:
    """Mean per-image MSE to the clean reference, before and after restoration."""
    model.eval()
    before, after = [], []
    for r in rows:
        x = to_tensor(load_image(r.path))
        ref = to_tensor(load_image(r.ref_path))
        restored = model.restore(x)
        before.append(F.mse_loss(x, ref).item())
        after.append(F.mse_loss(restored, ref).item())
    return {"degraded": float(np.mean(before)), "restored": float(np.mean(after)), "n": len(before)}


@torch.no_grad()
def dump_restorations(model: DRIModel, rows, out_dir, lam: float = 0.01, frozen: Encoder | None = None) -> Path:
    """Write restored PNGs plus a JSON sidecar of per-image loss components."""
    import json

    from .data import save_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    sidecar = {}
    for r in rows:
        if not r.ref_path:
            continue
        x = to_tensor(load_image(r.path))
        ref = to_tensor(load_image(r.ref_path))
        restored = model.restore(x)
        name = Path(r.path).stem + "_restored.png"
        save_image(restored[0].permute(1, 2, 0).numpy(), out_dir / name)
        entry = {
            "source": r.path,
            "mse_degraded": F.mse_loss(x, ref).item(),
            "mse_restored": F.mse_loss(restored, ref).item(),
            "restoration_loss": restoration_loss(restored, ref, lam).item(),
        }
        if frozen is not None:
            entry["rs_loss"] = rs_loss(restored, ref, frozen).item()
        sidecar[name] = entry
    path = out_dir / "restorations.json"
    path.write_text(json.dumps(sidecar, indent=2))
    return path
