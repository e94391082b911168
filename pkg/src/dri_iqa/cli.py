"""Command-line entry point: ``dri-iqa <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, dump_config, load_config
from .data import load_image, read_manifest, save_image, toy_corpus, write_manifest
from .degrade import DegradationError, apply_recipe, codec_provenance, default_palette, derive_seed, load_palette, make_contrastive_pair

log = logging.getLogger("dri_iqa")

SUBCOMMANDS = ("synth", "pretrain", "train", "eval", "predict", "plot")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class UsageError(Exception):
    """Anticipated failure: reported on one line, exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def write_run_manifest(run_dir, subcommand, config, seed, inputs, outputs, started) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items() if v is not None},
        "wall_clock_seconds": time.time() - started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    fd, tmp = tempfile.mkstemp(dir=run_dir, prefix=".manifest-")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2)
    target = run_dir / "run_manifest.json"
    os.replace(tmp, target)
    return target


def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"--input-dir {directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_synth(args, started):
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = load_palette(args.palette_config) if args.palette_config else default_palette()
    if args.toy_corpus:
        clean_dir = out / "clean"
        clean_dir.mkdir(exist_ok=True)
        sources = []
        for i, img in enumerate(toy_corpus(args.toy_corpus, args.toy_size, args.seed)):
            p = clean_dir / f"clean{i:04d}.png"
            save_image(img, p)
            sources.append(p)
    else:
        if not args.input_dir:
            raise UsageError("synth needs --input-dir or --toy-corpus N")
        sources = _list_images(args.input_dir)
    if not sources:
        raise UsageError("no input images found")
    codec = codec_provenance()
    rows = []
    with open(out / "provenance.jsonl", "w") as prov:
        for i, src in enumerate(sources):
            clean = load_image(src)
            for j in range(args.pairs_per_image):
                seed = derive_seed(args.seed, i, j)
                x1, x2, r1, r2 = make_contrastive_pair(clean, seed, palette)
                for view, img, recipe in ((1, x1, r1), (2, x2, r2)):
                    name = f"{src.stem}_p{j:02d}_x{view}.png"
                    save_image(img, out / name)
                    prov.write(json.dumps({"file": name, "source": os.path.relpath(src, out), "view": view,
                                           **recipe.to_json(), "codec": codec}) + "\n")
                    if args.manifest:
                        from .data import ManifestRow, toy_mos

                        rows.append(ManifestRow(str(out / name), toy_mos(recipe), str(src)))
    outputs = {"provenance": out / "provenance.jsonl"}
    if args.manifest:
        write_manifest(rows, out / "manifest.csv")
        outputs["manifest"] = out / "manifest.csv"
    write_run_manifest(out, "synth", {"palette": palette.to_json(), "pairs_per_image": args.pairs_per_image},
                       args.seed, {"input_dir": args.input_dir}, outputs, started)
    print(json.dumps({k: str(v) for k, v in outputs.items()}))


def _config(args, stage):
    cfg = load_config(args.config, stage=stage, seed=args.seed,
                      ablation=getattr(args, "ablation", None), epochs=args.epochs)
    return cfg


def cmd_pretrain(args, started):
    from .trainer import Checkpoint, pretrain_stage1

    cfg = _config(args, 1)
    if args.corpus:
        corpus = [load_image(p) for p in _list_images(args.corpus)]
    elif args.toy_corpus:
        corpus = toy_corpus(args.toy_corpus, args.toy_size, cfg.seed)
    else:
        raise UsageError("pretrain needs --corpus DIR or --toy-corpus N")
    resume = Checkpoint.load(args.resume, expect_dim=cfg.dim) if args.resume else None
    if resume is not None:
        print(json.dumps({"resume_seed": resume.seed}))
    out = Path(args.out)
    ckpt, _ = pretrain_stage1(corpus, cfg, out, resume=resume)
    dump_config(cfg, out / "config.yaml")
    write_run_manifest(out, "pretrain", cfg.to_dict(), cfg.seed, {"corpus": args.corpus, "resume": args.resume},
                       {"checkpoint": out / "stage1.pt", "losses": out / "loss_stage1.csv"}, started)
    print(json.dumps({"checkpoint": str(out / "stage1.pt"), "epoch": ckpt.epoch}))


def cmd_train(args, started):
    from .trainer import Checkpoint, dump_restorations, train_stage2

    cfg = _config(args, 2)
    rows = read_manifest(_need(args.manifest, "--manifest"))
    stage1 = Checkpoint.load(_need(args.stage1, "--stage1"), expect_dim=cfg.dim)
    resume = Checkpoint.load(args.resume, expect_dim=cfg.dim) if args.resume else None
    if resume is not None:
        print(json.dumps({"resume_seed": resume.seed}))
    out = Path(args.out)
    ckpt, _ = train_stage2(rows, stage1, cfg, out, resume=resume)
    outputs = {"checkpoint": out / f"stage2_{cfg.ablation}.pt", "losses": out / f"loss_stage2_{cfg.ablation}.csv"}
    if args.dump_restorations:
        outputs["restorations"] = dump_restorations(ckpt.model(), rows, args.dump_restorations,
                                                    cfg.lambda_perceptual, ckpt.frozen_encoder())
    dump_config(cfg, out / "config.yaml")
    write_run_manifest(out, "train", cfg.to_dict(), cfg.seed,
                       {"manifest": args.manifest, "stage1": args.stage1, "resume": args.resume}, outputs, started)
    print(json.dumps({k: str(v) for k, v in outputs.items()}))


def cmd_eval(args, started):
    from .evaluation import emit_scatter_plot, run_protocol
    from .trainer import Checkpoint, Stage2Data, checkpoint_scorer, train_stage2

    rows = read_manifest(_need(args.manifest, "--manifest"))
    ckpt = Checkpoint.load(_need(args.checkpoint, "--checkpoint"))
    seeds = list(range(args.seed, args.seed + args.seeds))
    if ckpt.stage == 2:
        scorer = checkpoint_scorer(ckpt, args.crop_size, args.crops, args.seed)

        def factory(train_rows, seed, split):
            return scorer
    else:
        # a stage-1 checkpoint: train stage 2 on every split's training rows
        base = load_config(args.train_config, stage=2, ablation=args.ablation)

        def factory(train_rows, seed, split):
            cfg = base.replace(seed=seed)
            trained, _ = train_stage2(Stage2Data.from_rows(train_rows), ckpt, cfg)
            return checkpoint_scorer(trained, args.crop_size, args.crops, seed)

    report = run_protocol(rows, factory, args.splits, seeds, args.train_fraction)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    outputs = {"report": out}
    if args.plot:
        first = report.records[(0, seeds[0])]
        emit_scatter_plot(first, args.plot)
        outputs["plot"] = args.plot
    write_run_manifest(out.parent, "eval", {"splits": args.splits, "seeds": seeds, "train_fraction": args.train_fraction,
                                            "crops": args.crops, "crop_size": args.crop_size},
                       args.seed, {"manifest": args.manifest, "checkpoint": args.checkpoint}, outputs, started)
    print(json.dumps(report.to_json()["aggregate"]))


def cmd_predict(args, started):
    from .predictor import predict_mos
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(_need(args.checkpoint, "--checkpoint"))
    if ckpt.stage != 2:
        raise UsageError("predict needs a stage-2 checkpoint")
    cfg = ckpt.train_config
    model = ckpt.model()
    image = load_image(_need(args.image, "--image"))
    pred = predict_mos(model.encoder, model.predictor, image, args.crop_size or cfg.crop, args.crops or cfg.n_crops, args.seed)
    result = {"score": pred.score, "per_crop_scores": pred.per_crop_scores}
    if args.run_dir:
        write_run_manifest(args.run_dir, "predict", cfg.to_dict(), args.seed,
                           {"checkpoint": args.checkpoint, "image": args.image}, {}, started)
    print(json.dumps(result))


def cmd_plot(args, started):
    from .evaluation import EvaluationRecord, emit_scatter_plot

    records = []
    import csv

    with open(_need(args.records, "--records"), newline="") as fh:
        for rec in csv.DictReader(fh):
            records.append(EvaluationRecord(float(rec["subjective"]), float(rec["predicted"]), rec.get("image_id", "")))
    values = emit_scatter_plot(records, args.out)
    print(json.dumps(values))


def _need(value, flag):
    if value is None:
        raise UsageError(f"missing required flag {flag}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dri-iqa", description="Dual-representation NR-IQA with restoration assistance")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize degraded pairs with provenance")
    s.add_argument("--input-dir")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs-per-image", type=int, default=1)
    s.add_argument("--palette-config")
    s.add_argument("--toy-corpus", type=int, metavar="N", help="generate N procedural clean images instead of --input-dir")
    s.add_argument("--toy-size", type=int, default=96)
    s.add_argument("--manifest", action="store_true", help="also write manifest.csv with synthetic MOS")

    for name, help_ in (("pretrain", "stage-1 contrastive pretraining"), ("train", "stage-2 joint training")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config")
        t.add_argument("--resume")
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        if name == "pretrain":
            t.add_argument("--corpus")
            t.add_argument("--toy-corpus", type=int, metavar="N")
            t.add_argument("--toy-size", type=int, default=96)
        else:
            t.add_argument("--manifest")
            t.add_argument("--stage1")
            t.add_argument("--ablation", choices=("v1", "v2", "v3", "proposed"))
            t.add_argument("--dump-restorations", metavar="DIR")

    e = sub.add_parser("eval", help="split x seed evaluation protocol")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--splits", type=int, default=10)
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--report", default="report.json")
    e.add_argument("--plot")
    e.add_argument("--crops", type=int)
    e.add_argument("--crop-size", type=int)
    e.add_argument("--train-config", help="stage-2 config when --checkpoint is a stage-1 checkpoint")
    e.add_argument("--ablation", choices=("v1", "v2", "v3", "proposed"))

    q = sub.add_parser("predict", help="score one image")
    q.add_argument("--checkpoint")
    q.add_argument("--image")
    q.add_argument("--crops", type=int)
    q.add_argument("--crop-size", type=int)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--run-dir")

    g = sub.add_parser("plot", help="scatter plot from a records CSV (subjective,predicted[,image_id])")
    g.add_argument("--records")
    g.add_argument("--out", required=True)
    return p


HANDLERS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "plot": cmd_plot,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    started = time.time()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        HANDLERS[args.command](args, started)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DegradationError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
