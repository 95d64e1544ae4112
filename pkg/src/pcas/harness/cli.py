"""Command line entry point: ``pcas <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..avsynth import DatasetManifest, generate_dataset, load_split
from ..avsynth.io import read_ppm, write_pgm
from ..segmenter import infer_masks
from . import embeddings
from .ablation import TABLES, run_ablation
from .config import load_config
from .evaluate import evaluate
from .train import load_model, train

log = logging.getLogger("pcas")


def _find_manifest(start: Path) -> DatasetManifest | None:
    for d in [start, *start.parents]:
        if (d / "manifest.json").exists():
            return DatasetManifest.load(d)
    return None


def cmd_gen_data(args) -> int:
    generate_dataset(args.out, args.samples, args.classes, args.seed, force=args.force)
    print(f"wrote {args.samples} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    state = train(cfg, args.data, args.out, resume=args.resume)
    print(f"trained {state.epoch} epochs ({state.step} steps); checkpoint {Path(args.out) / 'last.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.ckpt, args.data, args.split, use_crf=True if args.crf else None,
                      include_background=not args.no_background, beta2=args.beta2)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    tables = [t.strip() for t in args.rows.split(",") if t.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = Path(args.out) if args.out else Path(args.data) / "ablation"
    result = run_ablation(cfg, args.data, out, tables, seeds)
    print(result.format())
    return 0


def cmd_infer(args) -> int:
    model, cfg, _, _ = load_model(args.ckpt)
    clip = Path(args.clip)
    frame_paths = sorted((clip / "frames").glob("*.ppm"))
    if not frame_paths:
        raise FileNotFoundError(f"no frames/*.ppm under {clip}")
    manifest = _find_manifest(clip)
    classes = manifest.classes if manifest else [f"class_{i}" for i in range(1, cfg.encoder.num_classes + 1)]
    frames = np.stack([read_ppm(p) for p in frame_paths])
    # masks come from the visual path alone; the clip's audio is not needed
    masks = infer_masks(model.enc, model.dec, frames, cfg.segmenter, use_crf=args.crf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, m in zip(frame_paths, masks):
        write_pgm(out / (p.stem + ".pgm"), m)
    names = {"0": "background", **{str(i + 1): n for i, n in enumerate(classes)}, "255": "ignore"}
    (out / "classes.json").write_text(json.dumps(names, indent=2) + "\n")
    print(f"wrote {len(masks)} masks to {out}")
    return 0


def cmd_dump_embeddings(args) -> int:
    model, _, _, _ = load_model(args.ckpt)
    manifest = DatasetManifest.load(Path(args.data))
    clips = load_split(args.data, args.split, manifest)
    emb = embeddings.collect(model, clips, manifest.classes, project=not args.no_projection)
    embeddings.save(args.out, emb)
    print(f"wrote {len(emb.vectors)} rows to {args.out}; matched cos(v_sem, a_sem) = "
          f"{embeddings.matched_cosine(emb):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcas", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic audio-visual dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--samples", type=int, default=300)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on the train split (never reads masks)")
    t.add_argument("--config", type=Path, help="JSON config; every field optional")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against ground-truth masks")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="test")
    e.add_argument("--crf", action="store_true", help="refine predictions with the dense CRF")
    e.add_argument("--no-background", action="store_true", help="exclude background from mIoU")
    e.add_argument("--beta2", type=float, default=0.3)
    e.add_argument("--out", type=Path, help="also write the report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation tables")
    a.add_argument("--config", type=Path)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--rows", default="table3,table4", help=f"comma list of {sorted(TABLES)}")
    a.add_argument("--seeds", help="comma list of seeds (default: config seed)")
    a.add_argument("--out", type=Path, help="results directory (default DATA/ablation)")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("infer", help="predict masks for one clip directory")
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--clip", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--crf", action="store_true")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("dump-embeddings", help="write v_cls / v_sem / a_sem per frame")
    d.add_argument("--ckpt", required=True, type=Path)
    d.add_argument("--data", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)
    d.add_argument("--split", default="test")
    d.add_argument("--no-projection", action="store_true")
    d.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report any failure as a nonzero exit
        if args.verbose:
            log.exception("command failed")
        print(f"pcas {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
